//! Linear additive-noise structural causal models.
//!
//! Every node carries a mechanism `x_i = w_i · x_pa(i) + b_i + u_i`. With the
//! noise entering additively and with unit coefficient, the reduced form
//! `x = F(u)` is a bijection and abduction `u = F⁻¹(x)` is closed-form.
//!
//! The same JSON document that describes the graph also carries the
//! per-feature metadata used by the distance functions (`sigma`, `mutable`,
//! `categorical`), so a single file fully describes the explanation problem
//! apart from the classifier.

use std::collections::BTreeSet;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metadata describing one observed feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub index: usize,
    /// Scale used to normalise distances along this feature.
    pub sigma: f64,
    pub mutable: bool,
    pub categorical: bool,
}

/// One node of the model as it appears in the JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub parents: Vec<usize>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub noise_sigma: f64,
    pub sigma: f64,
    pub mutable: bool,
    pub categorical: bool,
    /// Set on nodes replaced by a constant through a hard intervention; the
    /// mechanism then ignores its noise term.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

impl NodeSpec {
    /// A source node `x = u` with no parents.
    pub fn source(name: impl Into<String>, sigma: f64) -> Self {
        Self {
            name: name.into(),
            parents: Vec::new(),
            weights: Vec::new(),
            intercept: 0.0,
            noise_sigma: sigma,
            sigma,
            mutable: true,
            categorical: false,
            clamped: false,
        }
    }

    /// A node `x = Σ w_k x_{p_k} + intercept + u`.
    pub fn linear(
        name: impl Into<String>,
        parents: Vec<usize>,
        weights: Vec<f64>,
        intercept: f64,
        sigma: f64,
    ) -> Self {
        Self {
            parents,
            weights,
            intercept,
            ..Self::source(name, sigma)
        }
    }

    pub fn frozen(mut self) -> Self {
        self.mutable = false;
        self
    }

    pub fn categorical(mut self) -> Self {
        self.categorical = true;
        self
    }

    pub fn with_noise_sigma(mut self, noise_sigma: f64) -> Self {
        self.noise_sigma = noise_sigma;
        self
    }

    fn parent_contribution(&self, x: &[f64]) -> f64 {
        self.parents
            .iter()
            .zip(&self.weights)
            .map(|(&p, &w)| w * x[p])
            .sum::<f64>()
            + self.intercept
    }
}

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(n: usize) -> Self {
                Self(vec![0.0; n])
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }

        impl From<&[f64]> for $name {
            fn from(v: &[f64]) -> Self {
                Self(v.to_vec())
            }
        }

        impl<const N: usize> From<[f64; N]> for $name {
            fn from(v: [f64; N]) -> Self {
                Self(v.to_vec())
            }
        }
    };
}

real_vector!(
    /// Observed features `x`, in raw units. Categorical entries hold their
    /// numeric encoding.
    FeatureVector
);
real_vector!(
    /// Exogenous noise values `u`.
    LatentVector
);

/// Hard intervention `do(X_A = values)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterventionSet {
    entries: Vec<(usize, f64)>,
}

impl InterventionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds an intervention from `(node, value)` pairs. Entries are kept
    /// sorted by node index.
    pub fn new(entries: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut entries: Vec<(usize, f64)> = entries.into_iter().collect();
        entries.sort_by_key(|&(i, _)| i);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidConfig(
                "intervention indices must be distinct".into(),
            ));
        }
        if let Some(&(i, v)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "intervention value {v} on node {i} is not finite"
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn value_of(&self, index: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .ok()
            .map(|k| self.entries[k].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Returns a topological order of the nodes, preferring the smallest
/// available index at every step so the result is stable.
pub fn validate_dag(nodes: &[NodeSpec]) -> Result<Vec<usize>> {
    let n = nodes.len();
    for node in nodes {
        if let Some(&p) = node.parents.iter().find(|&&p| p >= n) {
            return Err(Error::IndexOutOfRange { index: p, n });
        }
    }
    let mut indegree: Vec<usize> = nodes.iter().map(|nd| nd.parents.len()).collect();
    let mut children = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for &p in &node.parents {
            children[p].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every leftover node has a leftover parent; walking parents must revisit
    // a node, and the first revisited node lies on a cycle.
    let mut seen = vec![false; n];
    let mut cur = (0..n).find(|&i| indegree[i] > 0).expect("leftover node");
    while !seen[cur] {
        seen[cur] = true;
        cur = nodes[cur]
            .parents
            .iter()
            .copied()
            .find(|&p| indegree[p] > 0)
            .expect("leftover node has a leftover parent");
    }
    Err(Error::CycleDetected {
        node: cur,
        name: nodes[cur].name.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct ScmDocument {
    nodes: Vec<NodeSpec>,
}

/// A validated structural causal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmDocument", into = "ScmDocument")]
pub struct ScmSpec {
    nodes: Vec<NodeSpec>,
    order: Vec<usize>,
}

impl TryFrom<ScmDocument> for ScmSpec {
    type Error = Error;

    fn try_from(doc: ScmDocument) -> Result<Self> {
        Self::new(doc.nodes)
    }
}

impl From<ScmSpec> for ScmDocument {
    fn from(spec: ScmSpec) -> Self {
        Self { nodes: spec.nodes }
    }
}

impl ScmSpec {
    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidSpec("model has no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.weights.len() != node.parents.len() {
                return Err(Error::InvalidSpec(format!(
                    "node {i} ({}) has {} parents but {} weights",
                    node.name,
                    node.parents.len(),
                    node.weights.len()
                )));
            }
            if node.parents.contains(&i) {
                return Err(Error::CycleDetected {
                    node: i,
                    name: node.name.clone(),
                });
            }
            let mut sorted = node.parents.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidSpec(format!(
                    "node {i} ({}) lists a parent twice",
                    node.name
                )));
            }
            if !(node.sigma > 0.0 && node.sigma.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "node {i} ({}) has non-positive sigma {}",
                    node.name, node.sigma
                )));
            }
            if !(node.noise_sigma > 0.0 && node.noise_sigma.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "node {i} ({}) has non-positive noise_sigma {}",
                    node.name, node.noise_sigma
                )));
            }
            if !node.intercept.is_finite() || node.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "node {i} ({}) has a non-finite coefficient",
                    node.name
                )));
            }
        }
        if !nodes.iter().any(|nd| nd.mutable) {
            return Err(Error::InvalidSpec("at least one feature must be mutable".into()));
        }
        let order = validate_dag(&nodes)?;
        Ok(Self { nodes, order })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeSpec {
        &self.nodes[i]
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn features(&self) -> Vec<FeatureMeta> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(index, n)| FeatureMeta {
                name: n.name.clone(),
                index,
                sigma: n.sigma,
                mutable: n.mutable,
                categorical: n.categorical,
            })
            .collect()
    }

    /// Indices of the immutable features.
    pub fn frozen(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.nodes[i].mutable).collect()
    }

    pub fn mutable_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.nodes[i].mutable).collect()
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }

    /// Evaluates the reduced form `x = F(u)` in topological order.
    pub fn reduced_form(&self, u: &LatentVector) -> Result<FeatureVector> {
        self.check_len(u.len())?;
        let mut x = vec![0.0; self.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            let noise = if node.clamped { 0.0 } else { u[i] };
            x[i] = node.parent_contribution(&x) + noise;
        }
        Ok(FeatureVector(x))
    }

    /// Recovers the noise `u = F⁻¹(x)` consistent with an observation.
    ///
    /// On an intervened model the clamped nodes report their residual against
    /// the constant, which is zero for observations the model can produce.
    pub fn abduct(&self, x: &FeatureVector) -> Result<LatentVector> {
        self.check_len(x.len())?;
        Ok(LatentVector(
            self.nodes
                .iter()
                .enumerate()
                .map(|(i, node)| x[i] - node.parent_contribution(x))
                .collect(),
        ))
    }

    /// Hard intervention: each node in `a` loses its parents and becomes the
    /// constant given by the intervention. Other mechanisms are untouched.
    pub fn apply_intervention(&self, a: &InterventionSet) -> Result<ScmSpec> {
        let mut nodes = self.nodes.clone();
        for &(i, value) in a.entries() {
            let node = nodes.get_mut(i).ok_or(Error::IndexOutOfRange {
                index: i,
                n: self.len(),
            })?;
            node.parents.clear();
            node.weights.clear();
            node.intercept = value;
            node.clamped = true;
        }
        let order = validate_dag(&nodes)?;
        Ok(ScmSpec { nodes, order })
    }

    /// Interventional counterfactual by abduction, action, prediction.
    pub fn icf_three_step(&self, x: &FeatureVector, a: &InterventionSet) -> Result<FeatureVector> {
        let u = self.abduct(x)?;
        self.apply_intervention(a)?.reduced_form(&u)
    }

    /// The noise vector under which the unmodified model reproduces the
    /// interventional counterfactual, `F⁻¹(F_A(F⁻¹(x)))`.
    pub fn icf_noise_map(&self, x: &FeatureVector, a: &InterventionSet) -> Result<LatentVector> {
        self.abduct(&self.icf_three_step(x, a)?)
    }

    /// Jacobian `∂x/∂u` of the reduced form, row-major `n × n`.
    ///
    /// Lower triangular in topological order with a unit diagonal (zero on
    /// clamped nodes).
    pub fn reduced_form_jacobian(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut col = vec![0.0; n];
            for &i in &self.order {
                let node = &self.nodes[i];
                let direct = if i == j && !node.clamped { 1.0 } else { 0.0 };
                col[i] = node
                    .parents
                    .iter()
                    .zip(&node.weights)
                    .map(|(&p, &w)| w * col[p])
                    .sum::<f64>()
                    + direct;
            }
            for i in 0..n {
                jac[i][j] = col[i];
            }
        }
        jac
    }

    /// All strict descendants of the given nodes.
    pub fn descendants(&self, roots: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
        let roots: BTreeSet<usize> = roots.into_iter().collect();
        let mut reached = BTreeSet::new();
        for &i in &self.order {
            if self.nodes[i]
                .parents
                .iter()
                .any(|p| roots.contains(p) || reached.contains(p))
            {
                reached.insert(i);
            }
        }
        reached
    }

    /// Replaces the weights and intercept of one mechanism.
    pub fn with_mechanism(&self, node: usize, weights: Vec<f64>, intercept: f64) -> Result<ScmSpec> {
        let mut nodes = self.nodes.clone();
        let target = nodes.get_mut(node).ok_or(Error::IndexOutOfRange {
            index: node,
            n: self.len(),
        })?;
        target.weights = weights;
        target.intercept = intercept;
        ScmSpec::new(nodes)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
