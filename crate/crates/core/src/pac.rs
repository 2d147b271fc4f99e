//! Greedy PAC sufficient subsets along a node ordering.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::PolicyState;
use crate::instances::GeneratorConfig;
use crate::policy::{forward_with_features, PolicyParams};
use crate::rng::Stream;
use crate::{Error, Result};

/// Hoeffding sample size, with `delta` split over `k_max` tests when
/// `bonferroni` is set.
pub fn sample_size(eps: f64, delta: f64, k_max: usize, bonferroni: bool) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("epsilon {eps} is outside (0, 1)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta {delta} is outside (0, 1)")));
    }
    if bonferroni && k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    let tests = if bonferroni { k_max as f64 } else { 1.0 };
    Ok(libm::ceil(libm::log(2.0 * tests / delta) / (2.0 * eps * eps)) as usize)
}

/// Value given to entries of nodes outside the subset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The unperturbed instance value.
    #[default]
    Nominal,
    /// Per-column mean of the generator law.
    GeneratorMean,
    Zero,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Self::Nominal),
            "generator-mean" => Ok(Self::GeneratorMean),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nominal => "nominal",
            Self::GeneratorMean => "generator-mean",
            Self::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacConfig {
    pub eps: f64,
    pub delta: f64,
    pub sigma: f64,
    pub k_max: usize,
    pub bonferroni: bool,
    pub baseline: Baseline,
}

impl Default for PacConfig {
    fn default() -> Self {
        Self {
            eps: 0.2,
            delta: 0.2,
            sigma: 0.05,
            k_max: 25,
            bonferroni: true,
            baseline: Baseline::Nominal,
        }
    }
}

impl PacConfig {
    pub fn validate(&self) -> Result<()> {
        sample_size(self.eps, self.delta, self.k_max, self.bonferroni)?;
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> Result<usize> {
        sample_size(self.eps, self.delta, self.k_max, self.bonferroni)
    }
}

/// Flat baseline vector for `state`'s instance.
pub fn baseline_values(state: &PolicyState<'_>, baseline: Baseline, generator: &GeneratorConfig) -> Vec<f64> {
    let inst = state.instance;
    match baseline {
        Baseline::Nominal => inst.flat_values(),
        Baseline::Zero => vec![0.0; inst.dimension()],
        Baseline::GeneratorMean => {
            let means = generator.feature_means();
            inst.tensors
                .values()
                .flat_map(|t| {
                    let cols = &means[&t.key];
                    let w = cols.len();
                    (0..t.len()).map(move |j| cols[j % w])
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacSubsetResult {
    pub ordering: Vec<usize>,
    pub accepted_k: Option<usize>,
    pub subset: Vec<usize>,
    /// Preserved-argmax rate for `k = 1, 2, ...` up to acceptance or `k_max`.
    pub rates: Vec<f64>,
    pub samples: usize,
    pub margin: Option<f64>,
}

impl PacSubsetResult {
    pub fn succeeded(&self) -> bool {
        self.accepted_k.is_some()
    }
}

/// Walks `ordering` and accepts the first prefix whose preserved rate
/// reaches `1 - eps`. One set of perturbations is shared by every `k`.
/// Global entries are never masked.
pub fn greedy_subset(
    params: &PolicyParams,
    state: &PolicyState<'_>,
    ordering: &[usize],
    config: &PacConfig,
    baseline: &[f64],
    rng: &mut Stream,
) -> Result<PacSubsetResult> {
    config.validate()?;
    let inst = state.instance;
    if baseline.len() != inst.dimension() {
        return Err(Error::Schema("baseline length mismatch".into()));
    }
    let mut seen = vec![false; inst.n_nodes];
    for &n in ordering {
        if n >= inst.n_nodes || core::mem::replace(&mut seen[n], true) {
            return Err(Error::Contract("ordering is not a node permutation prefix".into()));
        }
    }
    let k_max = config.k_max.min(ordering.len());
    let samples = config.samples()?;
    let nominal = inst.flat_values();
    let nodes = inst.flat_nodes();
    let margin = forward_with_features(params, state, &nominal)?.margin();

    let normal = Normal::new(0.0, config.sigma).map_err(|e| Error::Config(format!("{e}")))?;
    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| nominal.iter().map(|x| x + normal.sample(rng)).collect())
        .collect();
    let targets: Vec<usize> = draws
        .iter()
        .map(|x| forward_with_features(params, state, x).map(|d| d.argmax))
        .collect::<Result<_>>()?;

    let mut in_subset = vec![false; inst.n_nodes];
    let mut rates = Vec::new();
    let mut accepted = None;
    let mut masked = vec![0.0; nominal.len()];
    for k in 1..=k_max {
        in_subset[ordering[k - 1]] = true;
        let mut preserved = 0;
        for (x, &target) in draws.iter().zip(&targets) {
            for (j, m) in masked.iter_mut().enumerate() {
                *m = match nodes[j] {
                    Some(n) if !in_subset[n] => baseline[j],
                    _ => x[j],
                };
            }
            if forward_with_features(params, state, &masked)?.argmax == target {
                preserved += 1;
            }
        }
        let rate = preserved as f64 / samples as f64;
        rates.push(rate);
        if rate >= 1.0 - config.eps {
            accepted = Some(k);
            break;
        }
    }
    Ok(PacSubsetResult {
        ordering: ordering.to_vec(),
        subset: accepted.map_or_else(Vec::new, |k| ordering[..k].to_vec()),
        accepted_k: accepted,
        rates,
        samples,
        margin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub failed: usize,
    pub succeeded: usize,
    pub failed_median: Option<f64>,
    pub succeeded_median: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median top-1 vs top-2 logit margin among failed and succeeded cells.
pub fn failure_diagnostics(results: impl IntoIterator<Item = (bool, Option<f64>)>) -> MarginSummary {
    let (mut failed, mut succeeded) = (Vec::new(), Vec::new());
    let (mut nf, mut ns) = (0, 0);
    for (ok, margin) in results {
        if ok {
            ns += 1;
            succeeded.extend(margin);
        } else {
            nf += 1;
            failed.extend(margin);
        }
    }
    MarginSummary {
        failed: nf,
        succeeded: ns,
        failed_median: median(&mut failed),
        succeeded_median: median(&mut succeeded),
    }
}
