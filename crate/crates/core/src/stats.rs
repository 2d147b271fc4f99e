//! Paired comparison of attribution backends against the counterfactual
//! reference signal.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// Two-sided exact McNemar test on the discordant counts.
pub fn mcnemar_exact(b01: u64, b10: u64) -> f64 {
    let n = b01 + b10;
    if n == 0 {
        return 1.0;
    }
    let k = b01.min(b10);
    // log C(n, i) - n log 2, accumulated in log space.
    let ln2 = core::f64::consts::LN_2;
    let mut log_c = 0.0;
    let mut terms = Vec::with_capacity(k as usize + 1);
    for i in 0..=k {
        if i > 0 {
            log_c += libm::log((n - i + 1) as f64) - libm::log(i as f64);
        }
        terms.push(log_c - n as f64 * ln2);
    }
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail = libm::exp(top) * terms.iter().map(|t| libm::exp(t - top)).sum::<f64>();
    (2.0 * tail).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub diff: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile 95% interval of `mean(a) - mean(b)` over resampled cells.
/// The interval is widened to contain the point estimate if needed.
pub fn paired_bootstrap_ci(pairs: &[(bool, bool)], resamples: usize, seed: u64) -> Result<BootstrapCi> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("bootstrap over zero pairs"));
    }
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let n = pairs.len();
    let delta = |p: &(bool, bool)| f64::from(u8::from(p.0)) - f64::from(u8::from(p.1));
    let diff = pairs.iter().map(delta).sum::<f64>() / n as f64;
    let mut stream = rng::stream(seed, &[rng::purpose::BOOTSTRAP]);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| delta(&pairs[stream.random_range(0..n)])).sum::<f64>() / n as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let idx = libm::round(p * (resamples - 1) as f64) as usize;
        stats[idx]
    };
    Ok(BootstrapCi {
        diff,
        lo: q(0.025).min(diff),
        hi: q(0.975).max(diff),
    })
}

/// Per-cell match indicators of two backends against the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub a: String,
    pub b: String,
    /// `a` wrong, `b` right.
    pub b01: u64,
    /// `a` right, `b` wrong.
    pub b10: u64,
    pub both_right: u64,
    pub both_wrong: u64,
}

impl PairedOutcome {
    pub fn from_pairs(a: &str, b: &str, pairs: &[(bool, bool)]) -> Self {
        let mut out = Self {
            a: a.into(),
            b: b.into(),
            b01: 0,
            b10: 0,
            both_right: 0,
            both_wrong: 0,
        };
        for &(x, y) in pairs {
            match (x, y) {
                (false, true) => out.b01 += 1,
                (true, false) => out.b10 += 1,
                (true, true) => out.both_right += 1,
                (false, false) => out.both_wrong += 1,
            }
        }
        out
    }

    pub fn n(&self) -> u64 {
        self.b01 + self.b10 + self.both_right + self.both_wrong
    }
}

/// One cell as seen by the statistics: its seed, whether it is certified,
/// and per-backend match indicators (meaningful only when certified).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub seed: u64,
    pub certified: bool,
    pub matches: BTreeMap<String, bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendSummary {
    pub backend: String,
    /// Mean over seeds of the per-seed agreement.
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub pooled: f64,
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub outcome: PairedOutcome,
    pub ci: BootstrapCi,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_cells: usize,
    pub n_cert: usize,
    /// Set when there are no certified cells; all other fields are then empty.
    pub empty: bool,
    pub std_convention: String,
    pub backends: Vec<BackendSummary>,
    pub pairs: Vec<PairSummary>,
}

pub const STD_CONVENTION: &str = "population";

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Per-backend agreement over certified cells and paired tests for every
/// ordered pair of `backends` (earlier backend as `a`). Seeds with no
/// certified cells are left out of the across-seed mean.
pub fn summarize(cells: &[CellOutcome], backends: &[&str], resamples: usize, seed: u64) -> Result<Summary> {
    let certified: Vec<&CellOutcome> = cells.iter().filter(|c| c.certified).collect();
    let mut summary = Summary {
        n_cells: cells.len(),
        n_cert: certified.len(),
        empty: certified.is_empty(),
        std_convention: STD_CONVENTION.into(),
        backends: Vec::new(),
        pairs: Vec::new(),
    };
    if summary.empty {
        return Ok(summary);
    }
    let hit = |c: &CellOutcome, b: &str| -> Result<bool> {
        c.matches
            .get(b)
            .copied()
            .ok_or_else(|| Error::Schema(alloc::format!("cell lacks backend `{b}`")))
    };
    for &b in backends {
        let mut by_seed: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for c in &certified {
            let e = by_seed.entry(c.seed).or_default();
            e.0 += usize::from(hit(c, b)?);
            e.1 += 1;
        }
        let per_seed: Vec<(u64, f64)> = by_seed.iter().map(|(&s, &(h, t))| (s, h as f64 / t as f64)).collect();
        let rates: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
        let (mean, std) = mean_std(&rates);
        let hits: usize = by_seed.values().map(|v| v.0).sum();
        summary.backends.push(BackendSummary {
            backend: b.into(),
            mean,
            std,
            pooled: hits as f64 / certified.len() as f64,
            per_seed,
        });
    }
    for (i, &a) in backends.iter().enumerate() {
        for &b in &backends[i + 1..] {
            let pairs: Vec<(bool, bool)> = certified
                .iter()
                .map(|c| Ok((hit(c, a)?, hit(c, b)?)))
                .collect::<Result<_>>()?;
            let outcome = PairedOutcome::from_pairs(a, b, &pairs);
            let p = mcnemar_exact(outcome.b01, outcome.b10);
            summary.pairs.push(PairSummary {
                ci: paired_bootstrap_ci(&pairs, resamples, seed)?,
                outcome,
                p,
            });
        }
    }
    Ok(summary)
}
