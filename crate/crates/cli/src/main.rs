use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use recourse_kit::bundle::{fit_german, FitConfig, ModelBundle};
use recourse_kit::data::{load_german_credit, ColumnMapping};
use recourse_kit::methods::{
    log_grid, render_table, sensitivity_trials, CounterfactualQuery, CounterfactualResult, Explainer, Method,
};
use recourse_kit::scm::FeatureVector;
use recourse_kit::validate::{run_validation, Mutation, ValidateConfig};
use recourse_kit::Error;

#[derive(Parser, Debug)]
#[command(name = "recourse-kit", version, about = "Counterfactual explanations over structural causal models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the causal model and classifier on the credit data.
    Fit(FitArgs),
    /// Explain one factual point with one method.
    Explain(QueryArgs),
    /// Run every method on one factual point.
    Compare(QueryArgs),
    /// Trace the distance trade-off over a grid of λ values.
    Sweep(SweepArgs),
    /// Re-solve under random perturbations of one mechanism.
    Sensitivity(SensitivityArgs),
    /// Run the built-in property suites.
    Validate(ValidateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, default_value = "data/german.data")]
    data: PathBuf,
    #[arg(long, default_value = "data/german_mapping.toml")]
    mapping: PathBuf,
    /// Bundle destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value = "model.json")]
    model: PathBuf,
    /// Factual values as name=value; categorical values may be given by name.
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    factual: Vec<String>,
    /// Target class label or index; defaults to the other class.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "brace")]
    method: Method,
    /// λ for brace; compare accepts a list.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Either `lo:hi:n` (log spaced) or a comma-separated list.
    #[arg(long, default_value = "0.01:100:20")]
    grid: String,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1.2)]
    lambda: f64,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 5.0)]
    noise_sigma: f64,
    /// Mechanism to perturb.
    #[arg(long, default_value = "amount")]
    node: String,
    #[arg(long, env = "RECOURSE_KIT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, env = "RECOURSE_KIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Grid resolution of the MAP suite, in noise standard deviations.
    #[arg(long)]
    grid: Option<f64>,
    /// Inject a known defect; the run is expected to fail.
    #[arg(long, value_enum)]
    mutation: Option<MutationArg>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MutationArg {
    SignFlip,
}

/// Outcome that is reported but is not an input error.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Failed>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Infeasible { .. } | Error::EmptyFeasibleSet) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Sensitivity(a) => cmd_sensitivity(&a),
        Command::Validate(a) => cmd_validate(&a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn cmd_fit(a: &FitArgs) -> anyhow::Result<()> {
    let mapping = ColumnMapping::from_path(&a.mapping)?;
    let ds = load_german_credit(&a.data, &mapping)?;
    let fit = fit_german(&ds, &FitConfig::default())?;
    let b = &fit.bundle;
    let mut summary = String::new();
    for node in b.scm.nodes() {
        let terms: Vec<String> = node
            .parents
            .iter()
            .zip(&node.weights)
            .map(|(&p, w)| format!("{w:+.6e}·{}", b.scm.node(p).name))
            .collect();
        summary.push_str(&format!(
            "{:<9} = {:.6e} {} + u  (noise σ {:.4e}, feature σ {:.4e}{})\n",
            node.name,
            node.intercept,
            terms.join(" "),
            node.noise_sigma,
            node.sigma,
            if node.mutable { "" } else { ", frozen" }
        ));
    }
    let h = &b.classifier;
    summary.push_str(&format!(
        "classifier: P({}) = σ({:+.6e} {})\n",
        h.labels[1],
        h.bias,
        h.weights
            .iter()
            .zip(b.scm.nodes())
            .map(|(w, n)| format!("{w:+.6e}·{}", n.name))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    summary.push_str(&format!(
        "rows {}  train accuracy {:.4}  majority rate {:.4}  newton iterations {}{}{}\n",
        ds.n_rows(),
        fit.train_accuracy,
        fit.majority_rate,
        fit.logistic_iterations,
        if fit.logistic_converged { "" } else { "  (not converged)" },
        if fit.separable { "  (separable)" } else { "" }
    ));
    let json = b.to_json()?;
    match &a.out {
        Some(p) => {
            fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            print!("{summary}");
        }
        None => {
            eprint!("{summary}");
            println!("{json}");
        }
    }
    Ok(())
}

struct Session {
    bundle: ModelBundle,
    explainer: Explainer,
    factual: FeatureVector,
    target: usize,
}

fn session(c: &Common) -> anyhow::Result<Session> {
    let bundle = ModelBundle::from_path(&c.model)?;
    let factual = parse_factual(&bundle, &c.factual)?;
    let explainer = Explainer::new(bundle.scm.clone(), bundle.classifier.clone())?;
    let h = &bundle.classifier;
    let target = match &c.target {
        Some(t) => h
            .parse_class(t)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown target class {t:?}")))?,
        None => 1 - h.classify(&factual)?,
    };
    Ok(Session {
        bundle,
        explainer,
        factual,
        target,
    })
}

fn parse_factual(bundle: &ModelBundle, items: &[String]) -> anyhow::Result<FeatureVector> {
    let n = bundle.scm.len();
    let mut values = vec![None; n];
    for item in items {
        let (name, text) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected name=value, got {item:?}")))?;
        let i = bundle
            .scm
            .index_of(name.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown feature {name:?}")))?;
        if values[i].is_some() {
            return Err(Error::InvalidConfig(format!("feature {name:?} given twice")).into());
        }
        values[i] = Some(bundle.parse_value(i, text.trim())?);
    }
    let missing: Vec<&str> = (0..n)
        .filter(|&i| values[i].is_none())
        .map(|i| bundle.scm.node(i).name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidConfig(format!("missing factual values for {}", missing.join(", "))).into());
    }
    Ok(FeatureVector(values.into_iter().map(Option::unwrap).collect()))
}

fn check_lambda(l: f64) -> anyhow::Result<f64> {
    if !(l >= 0.0 && l.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be finite and non-negative, got {l}")).into());
    }
    Ok(l)
}

/// Amount over duration, when the model has both features.
fn monthly(bundle: &ModelBundle, x: &[f64]) -> Option<f64> {
    let a = bundle.scm.index_of("amount")?;
    let d = bundle.scm.index_of("duration")?;
    Some(x[a] / x[d])
}

struct Row {
    label: String,
    x: Option<Vec<f64>>,
    d_x: Option<f64>,
    d_u: Option<f64>,
    status: String,
}

fn headers(bundle: &ModelBundle, factual: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = bundle.scm.nodes().iter().map(|n| n.name.clone()).collect();
    if monthly(bundle, factual).is_some() {
        h.push("monthly".into());
        h.push("monthly Δ%".into());
    }
    h.extend(["d_x".into(), "d_u".into()]);
    h
}

fn table(bundle: &ModelBundle, factual: &[f64], rows: &[Row]) -> String {
    let base = monthly(bundle, factual);
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|r| {
            let mut cells: Vec<String> = match &r.x {
                Some(x) => x.iter().enumerate().map(|(i, v)| bundle.format_value(i, *v)).collect(),
                None => vec!["-".into(); bundle.scm.len()],
            };
            if let Some(m0) = base {
                match r.x.as_deref().and_then(|x| monthly(bundle, x)) {
                    Some(m) => {
                        cells.push(format!("{m:.2}"));
                        cells.push(format!("{:+.1}", 100.0 * (m - m0) / m0));
                    }
                    None => cells.extend(["-".into(), "-".into()]),
                }
            }
            cells.push(r.d_x.map_or("-".into(), |v| format!("{v:.4}")));
            cells.push(r.d_u.map_or("-".into(), |v| format!("{v:.4}")));
            (r.label.clone(), cells)
        })
        .collect();
    let mut out = render_table(&headers(bundle, factual), &body);
    for r in rows.iter().filter(|r| r.status != "ok") {
        out.push_str(&format!("{}: {}\n", r.label, r.status));
    }
    out
}

fn csv_rows(bundle: &ModelBundle, factual: &[f64], first: &str, rows: &[Row]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec![first.to_string()];
    head.extend(bundle.scm.nodes().iter().map(|n| n.name.clone()));
    let has_monthly = monthly(bundle, factual).is_some();
    if has_monthly {
        head.push("monthly".into());
    }
    head.extend(["d_x".into(), "d_u".into(), "status".into()]);
    w.write_record(&head)?;
    let num = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        let mut rec = vec![r.label.clone()];
        match &r.x {
            Some(x) => rec.extend(x.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), bundle.scm.len())),
        }
        if has_monthly {
            rec.push(num(r.x.as_deref().and_then(|x| monthly(bundle, x))));
        }
        rec.extend([num(r.d_x), num(r.d_u), r.status.clone()]);
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?)
}

fn result_row(label: String, r: &CounterfactualResult) -> Row {
    Row {
        label,
        x: Some(r.x_cf.0.clone()),
        d_x: Some(r.d_x),
        d_u: Some(r.d_u),
        status: if r.converged { "ok".into() } else { "not converged".into() },
    }
}

fn original_row(factual: &[f64]) -> Row {
    Row {
        label: "original".into(),
        x: Some(factual.to_vec()),
        d_x: Some(0.0),
        d_u: Some(0.0),
        status: "ok".into(),
    }
}

fn method_label(m: Method, lambda: Option<f64>) -> String {
    match lambda {
        Some(l) => format!("{m} (λ={l})"),
        None => m.to_string(),
    }
}

fn cmd_explain(a: &QueryArgs) -> anyhow::Result<()> {
    let s = session(&a.common)?;
    let lambda = match a.lambda.as_slice() {
        [] => 0.0,
        [l] => check_lambda(*l)?,
        _ => bail!(Error::InvalidConfig("explain takes a single lambda".into())),
    };
    let q = CounterfactualQuery::new(s.factual.clone(), s.target, a.method).with_lambda(lambda);
    let r = s.explainer.explain(&q)?;
    let text = match a.format {
        Format::Json => r.to_json()?,
        Format::Table => {
            let rows = [original_row(&s.factual), result_row(method_label(r.method, r.lambda), &r)];
            table(&s.bundle, &s.factual, &rows)
        }
        Format::Csv => csv_rows(&s.bundle, &s.factual, "method", &[result_row(method_label(r.method, r.lambda), &r)])?,
    };
    emit(a.common.out.as_deref(), &text)
}

fn cmd_compare(a: &QueryArgs) -> anyhow::Result<()> {
    let s = session(&a.common)?;
    let lambdas = if a.lambda.is_empty() { vec![1.0, 1.2] } else { a.lambda.clone() };
    for &l in &lambdas {
        check_lambda(l)?;
    }
    let base = CounterfactualQuery::new(s.factual.clone(), s.target, Method::Wachter);
    let mut runs: Vec<(Method, Option<f64>)> = vec![(Method::Wachter, None), (Method::Car, None), (Method::Dbe, None)];
    runs.extend(lambdas.iter().map(|&l| (Method::Brace, Some(l))));

    let mut rows = vec![original_row(&s.factual)];
    let mut results = Vec::new();
    for (m, l) in runs {
        let q = base.clone().with_method(m).with_lambda(l.unwrap_or(0.0));
        let label = method_label(m, l);
        match s.explainer.explain(&q) {
            Ok(r) => {
                rows.push(result_row(label, &r));
                results.push(r);
            }
            Err(e @ (Error::Infeasible { .. } | Error::SubsetBudgetExceeded { .. })) => rows.push(Row {
                label,
                x: None,
                d_x: None,
                d_u: None,
                status: e.to_string(),
            }),
            Err(e) => return Err(e.into()),
        }
    }
    let text = match a.format {
        Format::Json => recourse_kit::json::to_string_pretty(&results)?,
        Format::Table => table(&s.bundle, &s.factual, &rows),
        Format::Csv => csv_rows(&s.bundle, &s.factual, "method", &rows)?,
    };
    emit(a.common.out.as_deref(), &text)
}

fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("cannot parse lambda grid {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi > lo && hi.is_finite() && n >= 2) {
            return Err(Error::InvalidConfig("log grid needs 0 < lo < hi and at least 2 points".into()).into());
        }
        return Ok(log_grid(lo, hi, n));
    }
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| bad().into()))
        .collect()
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    d_x: Option<f64>,
    d_u: Option<f64>,
    x_cf: Option<Vec<f64>>,
    status: String,
}

fn cmd_sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let s = session(&a.common)?;
    let lambdas = parse_grid(&a.grid)?;
    let q = CounterfactualQuery::new(s.factual.clone(), s.target, Method::Brace);
    let sweep = s.explainer.lambda_sweep(&q, &lambdas)?;
    let mut rows: Vec<SweepRow> = sweep
        .points
        .iter()
        .map(|p| SweepRow {
            lambda: p.lambda,
            d_x: Some(p.d_x),
            d_u: Some(p.d_u),
            x_cf: Some(p.x_cf.0.clone()),
            status: if p.violation { "violation".into() } else { "ok".into() },
        })
        .chain(sweep.failures.iter().map(|(l, why)| SweepRow {
            lambda: *l,
            d_x: None,
            d_u: None,
            x_cf: None,
            status: format!("infeasible: {why}"),
        }))
        .collect();
    rows.sort_by(|x, y| x.lambda.total_cmp(&y.lambda));

    let text = match a.format {
        Format::Json => recourse_kit::json::to_string_pretty(&rows)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut head: Vec<String> = vec!["lambda".into(), "d_x".into(), "d_u".into()];
            head.extend(s.bundle.scm.nodes().iter().map(|n| n.name.clone()));
            head.push("status".into());
            w.write_record(&head)?;
            for r in &rows {
                let mut rec = vec![r.lambda.to_string()];
                rec.push(r.d_x.map_or(String::new(), |v| v.to_string()));
                rec.push(r.d_u.map_or(String::new(), |v| v.to_string()));
                match &r.x_cf {
                    Some(x) => rec.extend(x.iter().map(|v| v.to_string())),
                    None => rec.extend(std::iter::repeat_n(String::new(), s.bundle.scm.len())),
                }
                rec.push(r.status.clone());
                w.write_record(&rec)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?
        }
        Format::Table => {
            let body: Vec<Row> = rows
                .iter()
                .map(|r| Row {
                    label: format!("λ={:.4}", r.lambda),
                    x: r.x_cf.clone(),
                    d_x: r.d_x,
                    d_u: r.d_u,
                    status: r.status.clone(),
                })
                .collect();
            table(&s.bundle, &s.factual, &body)
        }
    };
    emit(a.common.out.as_deref(), &text)?;
    if sweep.violations() > 0 {
        eprintln!("warning: {} monotonicity violation(s) flagged", sweep.violations());
    }
    Ok(())
}

fn cmd_sensitivity(a: &SensitivityArgs) -> anyhow::Result<()> {
    let s = session(&a.common)?;
    check_lambda(a.lambda)?;
    let node = s
        .bundle
        .scm
        .index_of(&a.node)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown node {:?}", a.node)))?;
    let q = CounterfactualQuery::new(s.factual.clone(), s.target, Method::Brace).with_lambda(a.lambda);
    let trials = sensitivity_trials(&s.explainer, &q, node, a.noise_sigma, a.trials, a.seed)?;
    let text = match a.format {
        Format::Json => recourse_kit::json::to_string_pretty(&trials)?,
        Format::Table | Format::Csv => {
            let mut rows = vec![original_row(&s.factual)];
            rows.extend(trials.iter().map(|t| match (&t.result, &t.error) {
                (Some(r), _) => result_row(format!("trial {}", t.trial), r),
                (None, e) => Row {
                    label: format!("trial {}", t.trial),
                    x: None,
                    d_x: None,
                    d_u: None,
                    status: e.clone().unwrap_or_default(),
                },
            }));
            if a.format == Format::Csv {
                csv_rows(&s.bundle, &s.factual, "trial", &rows)?
            } else {
                table(&s.bundle, &s.factual, &rows)
            }
        }
    };
    emit(a.common.out.as_deref(), &text)
}

fn cmd_validate(a: &ValidateArgs) -> anyhow::Result<()> {
    let mut cfg = ValidateConfig {
        seed: a.seed,
        mutation: a.mutation.map(|MutationArg::SignFlip| Mutation::SignFlipNoiseMap),
        ..Default::default()
    };
    if let Some(res) = a.grid {
        cfg.grid.resolution = res;
    }
    let report = run_validation(&cfg)?;
    let text = match a.format {
        Format::Json => recourse_kit::json::to_string_pretty(&report)?,
        Format::Table | Format::Csv => report.to_string(),
    };
    emit(a.out.as_deref(), &text)?;
    if !report.all_passed() {
        return Err(Failed("validation failed".into()).into());
    }
    Ok(())
}
