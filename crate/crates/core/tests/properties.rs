use proptest::prelude::*;

use recourse_kit::backtrack::BacktrackKernel;
use recourse_kit::data::{desk_instance, synth_scm_generate, DeskInstance};
use recourse_kit::learners::LogisticClassifier;
use recourse_kit::methods::{CounterfactualQuery, Explainer, Method};
use recourse_kit::scm::{FeatureVector, InterventionSet, LatentVector, NodeSpec, ScmSpec};
use recourse_kit::solver::{grid_oracle, penalty_objective, GridSpec, Objective, SolverConfig, TermWeights};

fn explainer(d: &DeskInstance) -> Explainer {
    Explainer::new(d.spec.clone(), d.classifier.clone()).unwrap()
}

fn query(d: &DeskInstance, m: Method) -> CounterfactualQuery {
    CounterfactualQuery::new(d.x_factual.clone(), d.target, m)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn reduced_form_inverts_abduction(seed in any::<u64>(), n in 2usize..=5, density in 0.0f64..=1.0, zs in prop::collection::vec(-3.0f64..3.0, 5)) {
        let scm = synth_scm_generate(seed, n, density).unwrap();
        let u = LatentVector(zs[..n].to_vec());
        let x = scm.spec.reduced_form(&u).unwrap();
        prop_assert!(max_abs(&scm.spec.abduct(&x).unwrap(), &u) <= 1e-12);
        prop_assert!(max_abs(&scm.spec.reduced_form(&scm.spec.abduct(&x).unwrap()).unwrap(), &x) <= 1e-12);
    }

    #[test]
    fn noise_remap_reproduces_the_intervention(
        seed in any::<u64>(), n in 2usize..=5, density in 0.0f64..=1.0,
        zs in prop::collection::vec(-3.0f64..3.0, 5), mask in 1u32..32, vals in prop::collection::vec(-5.0f64..5.0, 5),
    ) {
        let scm = synth_scm_generate(seed, n, density).unwrap();
        let x = scm.spec.reduced_form(&LatentVector(zs[..n].to_vec())).unwrap();
        let mask = mask & ((1 << n) - 1);
        prop_assume!(mask != 0);
        let a = InterventionSet::new((0..n).filter(|i| mask >> i & 1 == 1).map(|i| (i, vals[i]))).unwrap();
        let icf = scm.spec.icf_three_step(&x, &a).unwrap();
        let via = scm.spec.reduced_form(&scm.spec.icf_noise_map(&x, &a).unwrap()).unwrap();
        prop_assert!(max_abs(&icf, &via) <= 1e-9);
        // Intervened values are exact and non-descendants are untouched.
        let desc = scm.spec.descendants(a.indices());
        for i in 0..n {
            if let Some(v) = a.value_of(i) {
                prop_assert_eq!(icf[i], v);
            } else if !desc.contains(&i) {
                prop_assert_eq!(icf[i], x[i]);
            }
        }
    }

    #[test]
    fn log_density_peaks_at_the_factual(seed in any::<u64>(), n in 2usize..=5, lambda in 0.0f64..5.0, zs in prop::collection::vec(-3.0f64..3.0, 10)) {
        let scm = synth_scm_generate(seed, n, 0.5).unwrap();
        let k = BacktrackKernel::new(scm.spec, lambda).unwrap();
        let u = LatentVector(zs[..n].to_vec());
        let v = LatentVector(zs[5..5 + n].to_vec());
        prop_assert_eq!(k.log_pb_unnormalized(&u, &u).unwrap(), 0.0);
        prop_assert!(k.log_pb_unnormalized(&u, &v).unwrap() <= 0.0);
    }

    #[test]
    fn log_density_decreases_in_lambda(seed in any::<u64>(), n in 2usize..=5, l1 in 0.0f64..5.0, dl in 0.01f64..5.0, zs in prop::collection::vec(-3.0f64..3.0, 10)) {
        let scm = synth_scm_generate(seed, n, 0.5).unwrap();
        let u = LatentVector(zs[..n].to_vec());
        let v = LatentVector(zs[5..5 + n].to_vec());
        prop_assume!(max_abs(&u, &v) > 1e-3);
        let lo = BacktrackKernel::new(scm.spec.clone(), l1).unwrap().log_pb_unnormalized(&u, &v).unwrap();
        let hi = BacktrackKernel::new(scm.spec, l1 + dl).unwrap().log_pb_unnormalized(&u, &v).unwrap();
        prop_assert!(hi < lo);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn brace_interpolates_between_the_limits(seed in any::<u64>(), n in 2usize..=5, lambda in 0.05f64..20.0) {
        let d = desk_instance(seed, n, 0.5).unwrap();
        let e = explainer(&d);
        let w = e.explain_wachter(&query(&d, Method::Wachter)).unwrap();
        let dbe = e.explain_dbe(&query(&d, Method::Dbe)).unwrap();
        let b = e.explain_brace(&query(&d, Method::Brace).with_lambda(lambda)).unwrap();
        prop_assert!(b.d_x >= w.d_x - 1e-6);
        prop_assert!(b.d_u >= dbe.d_u - 1e-6);
        prop_assert_eq!(d.classifier.classify(&b.x_cf).unwrap(), d.target);
        prop_assert!(max_abs(&d.spec.reduced_form(&b.u_cf).unwrap(), &b.x_cf) <= 1e-12 * (1.0 + b.x_cf.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn sweep_frontier_is_monotone(seed in any::<u64>(), n in 2usize..=5) {
        let d = desk_instance(seed, n, 0.5).unwrap();
        let lambdas = recourse_kit::methods::log_grid(0.01, 100.0, 10);
        let s = explainer(&d).lambda_sweep(&query(&d, Method::Brace), &lambdas).unwrap();
        prop_assert!(s.failures.is_empty());
        prop_assert_eq!(s.violations(), 0);
    }

    #[test]
    fn matched_noise_distance_dominates(seed in any::<u64>(), n in 2usize..=4) {
        let d = desk_instance(seed, n, 0.5).unwrap();
        let r = explainer(&d).match_alpha(&query(&d, Method::Brace)).unwrap();
        prop_assert!(r.dominance, "{} > {}", r.brace.d_x, r.car.d_x);
        prop_assert!((r.brace.d_u - r.alpha).abs() <= 1e-4 * (1.0 + r.alpha));
    }

    #[test]
    fn matched_noise_distance_dominates_single_interventions(seed in any::<u64>(), n in 2usize..=5) {
        let d = desk_instance(seed, n, 0.5).unwrap();
        let e = explainer(&d);
        let q = query(&d, Method::Brace);
        for i in d.spec.mutable_indices() {
            let Ok(car) = e.car_subset(&q, &[i]) else { continue };
            let r = e.match_alpha_with(&q, car).unwrap();
            prop_assert!(r.dominance, "node {}: {} > {}", i, r.brace.d_x, r.car.d_x);
            prop_assert!((r.brace.d_u - r.alpha).abs() <= 1e-4 * (1.0 + r.alpha));
            prop_assert_eq!(r.bracket_failure, r.fallback.is_some());
        }
    }
}

#[test]
fn single_point_sweeps_match_the_limits() {
    for seed in 0..5 {
        let d = desk_instance(seed, 3, 0.5).unwrap();
        let e = explainer(&d);
        let w = e.explain_wachter(&query(&d, Method::Wachter)).unwrap();
        let s0 = e.lambda_sweep(&query(&d, Method::Brace), &[0.0]).unwrap();
        assert!((s0.points[0].d_x - w.d_x).abs() <= 1e-9);
        let dbe = e.explain_dbe(&query(&d, Method::Dbe)).unwrap();
        let s1 = e.lambda_sweep(&query(&d, Method::Brace), &[1e6]).unwrap();
        assert!((s1.points[0].d_u - dbe.d_u).abs() <= 1e-3);
    }
}

#[test]
fn log_density_is_the_negated_objective_at_zero_penalty() {
    for seed in 0..50u64 {
        let d = desk_instance(seed, 2 + (seed % 4) as usize, 0.5).unwrap();
        let lambda = 0.25 * (seed % 9) as f64;
        let mut obj = Objective::new(d.spec.clone(), d.classifier.clone(), d.x_factual.clone(), d.target).unwrap();
        obj.x_factual = obj.spec.reduced_form(&obj.u_factual).unwrap();
        let u_cf = LatentVector(
            obj.u_factual
                .iter()
                .enumerate()
                .map(|(i, u)| u + (0.3 + 0.1 * i as f64) * obj.metrics.u_scale(i) * if (seed + i as u64) % 2 == 0 { 1.0 } else { -1.0 })
                .collect(),
        );
        // A vanishing smoothing parameter makes the smoothed terms exact.
        let cfg = SolverConfig {
            l1_smoothing_mu: 1e-300,
            ..SolverConfig::default().with_lambda(lambda)
        };
        let (v, _) = penalty_objective(&obj, &u_cf, 0.0, &cfg).unwrap();
        let lp = BacktrackKernel::new(d.spec.clone(), lambda)
            .unwrap()
            .log_pb_unnormalized(&obj.u_factual, &u_cf)
            .unwrap();
        assert!((lp + v).abs() <= 1e-10, "seed {seed}: {lp} vs {v}");
    }
}

#[test]
fn one_dimensional_wachter_is_the_boundary_projection() {
    // Frozen g plus one mutable source; the boundary solves w_g·g + w_a·a + b = 0.
    let spec = ScmSpec::new(vec![
        NodeSpec::source("g", 1.0).frozen().categorical(),
        NodeSpec::linear("a", vec![0], vec![0.7], 2.0, 3.0),
    ])
    .unwrap();
    for (wa, b) in [(0.8, -4.0), (-1.3, 2.0), (0.05, -0.4)] {
        let h = LogisticClassifier::new(vec![0.5, wa], b);
        let x = FeatureVector::from([1.0, 1.0]);
        let target = 1 - h.classify(&x).unwrap();
        let e = Explainer::new(spec.clone(), h).unwrap();
        let r = e.explain_wachter(&CounterfactualQuery::new(x.clone(), target, Method::Wachter)).unwrap();
        let boundary = -(b + 0.5 * 1.0) / wa;
        let exact = (boundary - 1.0).abs() / 3.0;
        assert!((r.d_x - exact).abs() <= 1e-4, "{} vs {exact}", r.d_x);
    }
}

#[test]
fn car_matches_exhaustive_subset_and_value_search() {
    let res = 0.005;
    for seed in 0..6u64 {
        let d = desk_instance(seed, 2, 0.9).unwrap();
        let e = explainer(&d);
        let car = e.explain_car(&query(&d, Method::Car)).unwrap();
        let metrics = recourse_kit::metrics::Metrics::for_spec(&d.spec, Default::default());
        let steps: Vec<f64> = GridSpec { half_width: 5.0, resolution: res }.offsets().unwrap();
        let sig: Vec<f64> = (0..2).map(|i| d.spec.node(i).sigma).collect();
        let mut best = f64::INFINITY;
        let mut bound: f64 = 0.0;
        for subset in [vec![0], vec![1], vec![0, 1]] {
            // Per-axis Lipschitz constant of d_X in the intervention values.
            let at = |vals: &[f64]| {
                let a = InterventionSet::new(subset.iter().zip(vals).map(|(&i, &v)| (i, v))).unwrap();
                d.spec.icf_three_step(&d.x_factual, &a).unwrap()
            };
            let base: Vec<f64> = subset.iter().map(|&i| d.x_factual[i]).collect();
            let x0 = at(&base);
            let lip: f64 = (0..subset.len())
                .map(|k| {
                    let mut v = base.clone();
                    v[k] += sig[subset[k]];
                    metrics.d_x(&x0, &at(&v)).unwrap()
                })
                .sum();
            bound = bound.max(res * lip);
            let mut visit = |vals: &[f64]| {
                let x = at(vals);
                if d.classifier.classify(&x).unwrap() == d.target {
                    best = best.min(metrics.d_x(&d.x_factual, &x).unwrap());
                }
            };
            if subset.len() == 1 {
                let i = subset[0];
                for s in &steps {
                    visit(&[d.x_factual[i] + s * sig[i]]);
                }
            } else {
                for s in steps.iter().step_by(10) {
                    for t in steps.iter().step_by(10) {
                        visit(&[d.x_factual[0] + s * sig[0], d.x_factual[1] + t * sig[1]]);
                    }
                }
            }
        }
        assert!(car.d_x <= best + 1e-9, "seed {seed}: car {} grid {best}", car.d_x);
        assert!(best - car.d_x <= 10.0 * bound + 1e-9, "seed {seed}: car {} grid {best} bound {bound}", car.d_x);
    }
}

#[test]
fn dbe_matches_the_noise_only_grid_oracle() {
    let grid = GridSpec { half_width: 5.0, resolution: 0.01 };
    for seed in 0..4u64 {
        let d = desk_instance(seed, 2, 0.5).unwrap();
        let dbe = explainer(&d).explain_dbe(&query(&d, Method::Dbe)).unwrap();
        let obj = Objective::new(d.spec.clone(), d.classifier.clone(), d.x_factual.clone(), d.target).unwrap();
        let (_, g) = grid_oracle(&obj, TermWeights::dbe(), &grid).unwrap();
        // d_U is 1-Lipschitz in normalised noise, so one cell per axis costs ≤ √2·res.
        assert!(dbe.d_u <= g + 1e-9, "seed {seed}");
        assert!(g - dbe.d_u <= 2f64.sqrt() * grid.resolution, "seed {seed}: {} vs {g}", dbe.d_u);
    }
}
