//! Family-level attribution of a decoding step.
//!
//! `Lambda_k = lambda_k * sum_{entries of family k} |d log pi / d x * x|`.
//! The three backends differ only in where `lambda` comes from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::instances::{ConstraintFamily, Instance};
use crate::lp::{self, Aggregation, LinearProgram, Objective, Sense};
use crate::policy::FeatureGrads;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Lp,
    Subgrad,
    Proxy,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Lp, Backend::Subgrad, Backend::Proxy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lp => "lp",
            Self::Subgrad => "subgrad",
            Self::Proxy => "proxy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lp" => Ok(Self::Lp),
            "subgrad" => Ok(Self::Subgrad),
            "proxy" => Ok(Self::Proxy),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub backend: Backend,
    /// `(family, Lambda_k)` in family order.
    pub lambda_scores: Vec<(String, f64)>,
    pub top1: String,
    /// Family-agnostic `|grad * x|` summed per node.
    pub node_scores: Vec<f64>,
    /// `(family, lambda_k)` used for the weighting.
    pub lambda: Vec<(String, f64)>,
}

impl AttributionResult {
    /// Nodes by decreasing score, lowest index first on ties.
    pub fn node_ordering(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.node_scores.len()).collect();
        order.sort_by(|&a, &b| self.node_scores[b].total_cmp(&self.node_scores[a]).then(a.cmp(&b)));
        order
    }
}

/// Unit multipliers for every family.
pub fn proxy_lambda(families: &[ConstraintFamily]) -> Vec<(String, f64)> {
    families.iter().map(|f| (f.name.clone(), 1.0)).collect()
}

/// `sum |grad * x|` over the entries of `family`.
pub fn family_mass(instance: &Instance, grads: &FeatureGrads, family: &ConstraintFamily) -> Result<f64> {
    let mut total = 0.0;
    for key in &family.feature_keys {
        let t = instance
            .tensors
            .get(key)
            .ok_or_else(|| Error::Schema(format!("family `{}` references missing tensor `{key}`", family.name)))?;
        let g = grads
            .get(key)
            .ok_or_else(|| Error::Schema(format!("no gradient for tensor `{key}`")))?;
        if g.len() != t.values.len() {
            return Err(Error::Schema(format!("gradient length mismatch for `{key}`")));
        }
        total += g.iter().zip(&t.values).map(|(g, x)| libm::fabs(g * x)).sum::<f64>();
    }
    Ok(total)
}

/// Highest-scoring name; the lexicographically smallest wins ties.
pub fn top1(scores: &[(String, f64)]) -> Option<&str> {
    scores
        .iter()
        .max_by(|(na, a), (nb, b)| a.total_cmp(b).then_with(|| nb.cmp(na)))
        .map(|(n, _)| n.as_str())
}

pub fn attribute(
    backend: Backend,
    instance: &Instance,
    grads: &FeatureGrads,
    lambda: &[(String, f64)],
    families: &[ConstraintFamily],
) -> Result<AttributionResult> {
    let mut scores = Vec::with_capacity(families.len());
    let mut used = Vec::with_capacity(families.len());
    for fam in families {
        let l = lambda
            .iter()
            .find(|(n, _)| n == &fam.name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownFamily(fam.name.clone()))?;
        if !(l >= 0.0) {
            return Err(Error::Domain(format!("negative multiplier for `{}`", fam.name)));
        }
        let mass = family_mass(instance, grads, fam)?;
        scores.push((fam.name.clone(), if l == 0.0 { 0.0 } else { l * mass }));
        used.push((fam.name.clone(), l));
    }
    let mut node_scores = vec![0.0; instance.n_nodes];
    for (key, t) in &instance.tensors {
        let g = grads
            .get(key)
            .ok_or_else(|| Error::Schema(format!("no gradient for tensor `{key}`")))?;
        for (j, (g, x)) in g.iter().zip(&t.values).enumerate() {
            if let Some(node) = t.node_of(j) {
                node_scores[node] += libm::fabs(g * x);
            }
        }
    }
    let top = top1(&scores).ok_or_else(|| Error::Schema("no families".into()))?.into();
    Ok(AttributionResult {
        backend,
        lambda_scores: scores,
        top1: top,
        node_scores,
        lambda: used,
    })
}

/// Outcome of Lagrangian subgradient ascent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgradResult {
    pub lambda: Vec<(String, f64)>,
    /// Final multiplier per LP row.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

/// Subgradient multipliers for the LP relaxation of `instance`, step
/// `step0 / t`. A negative control: the inner minimisation is a box
/// heuristic, not an exact Lagrangian subproblem.
pub fn subgrad_lambda(instance: &Instance, iterations: usize, step0: f64) -> Result<SubgradResult> {
    subgradient(&lp::build_lp(instance), &instance.families, iterations, step0)
}

pub fn subgradient(
    lp: &LinearProgram,
    families: &[ConstraintFamily],
    iterations: usize,
    step0: f64,
) -> Result<SubgradResult> {
    if iterations == 0 {
        return Err(Error::Config("subgradient needs at least one iteration".into()));
    }
    if !(step0 > 0.0) {
        return Err(Error::Config("subgradient step must be positive".into()));
    }
    lp.validate()?;
    let n = lp.num_vars();
    let sign = match lp.objective {
        Objective::Minimize => 1.0,
        Objective::Maximize => -1.0,
    };
    // Infinite upper bounds are capped so the box subproblem stays bounded.
    let max_rhs = lp.rows.iter().map(|r| libm::fabs(r.rhs)).fold(0.0, f64::max);
    let max_coef = lp
        .rows
        .iter()
        .flat_map(|r| r.coeffs.iter().map(|c| libm::fabs(c.1)))
        .fold(0.0, f64::max);
    let cap = 1.0 + max_rhs + max_coef;
    let upper: Vec<f64> = (0..n)
        .map(|j| if lp.upper[j].is_finite() { lp.upper[j] } else { lp.lower[j] + cap })
        .collect();

    let mut mu = vec![0.0; lp.rows.len()];
    let mut x = vec![0.0; n];
    for t in 1..=iterations {
        // min over the box of sign*c x + sum_i mu_i * g_i(x), where g_i is
        // the row violation oriented so that g_i <= 0 when satisfied.
        let mut reduced: Vec<f64> = lp.costs.iter().map(|c| sign * c).collect();
        for (row, &m) in lp.rows.iter().zip(&mu) {
            let o = orientation(row.sense);
            for &(j, a) in &row.coeffs {
                reduced[j] += m * o * a;
            }
        }
        for j in 0..n {
            x[j] = if reduced[j] < 0.0 { upper[j] } else { lp.lower[j] };
        }
        let step = step0 / t as f64;
        for (row, m) in lp.rows.iter().zip(mu.iter_mut()) {
            let ax: f64 = row.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            let g = orientation(row.sense) * (ax - row.rhs);
            *m += step * g;
            if row.sense != Sense::Eq && *m < 0.0 {
                *m = 0.0;
            }
        }
    }
    let tags: Vec<String> = lp.rows.iter().map(|r| r.tag.clone()).collect();
    let lambda = lp::aggregate_duals(&mu, &tags, families, Aggregation::Mean)?;
    Ok(SubgradResult {
        lambda,
        multipliers: mu,
        iterations,
    })
}

fn orientation(sense: Sense) -> f64 {
    match sense {
        Sense::Le | Sense::Eq => 1.0,
        Sense::Ge => -1.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub mean: f64,
    pub cells: usize,
    /// `(seed, mean, cells)` per seed.
    pub per_seed: Vec<(u64, f64, usize)>,
}

/// Fraction of cells whose attributed family equals the reference family.
/// Callers pass certified cells only.
pub fn agreement<'a>(cells: impl IntoIterator<Item = (u64, &'a str, &'a str)>) -> Result<Agreement> {
    let mut by_seed: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for (seed, attributed, reference) in cells {
        let e = by_seed.entry(seed).or_default();
        e.0 += usize::from(attributed == reference);
        e.1 += 1;
    }
    let (hits, total) = by_seed.values().fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
    if total == 0 {
        return Err(Error::UndefinedMetric("agreement over zero certified cells"));
    }
    Ok(Agreement {
        mean: hits as f64 / total as f64,
        cells: total,
        per_seed: by_seed
            .into_iter()
            .map(|(s, (h, t))| (s, h as f64 / t as f64, t))
            .collect(),
    })
}
