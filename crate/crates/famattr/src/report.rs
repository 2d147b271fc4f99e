//! `stats.json`, figure data and text tables, all derived from `cells.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use famattr_core::pac::{failure_diagnostics, median};
use famattr_core::stats::{mcnemar_exact, mean_std, paired_bootstrap_ci, summarize, CellOutcome, PairedOutcome};
use serde::{Deserialize, Serialize};

use crate::cells::{CellRecord, CellsHeader, SCHEMA_VERSION};
use crate::error::AppResult;

/// Backends in reporting order.
pub const BACKENDS: [&str; 3] = ["lp", "subgrad", "proxy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub mean: f64,
    pub std: f64,
    pub pooled: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub per_seed: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub diff: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// First backend wrong, second right.
    pub b01: u64,
    /// First backend right, second wrong.
    pub b10: u64,
    pub both_right: u64,
    pub both_wrong: u64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacStats {
    pub samples: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub per_test_succeeded: usize,
    pub mean_k: Option<f64>,
    pub median_k: Option<f64>,
    pub max_k: Option<usize>,
    pub failed_median_margin: Option<f64>,
    pub succeeded_median_margin: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityStats {
    pub unconstrained_candidates: usize,
    pub unconstrained_flipping: usize,
    pub unconstrained_flipping_arith: usize,
    /// Arithmetic pass rate of flipping unconstrained candidates.
    pub unconstrained_pass_rate: Option<f64>,
    /// Same rate on the constrained search's winners.
    pub constrained_pass_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub schema_version: u32,
    pub problem: String,
    pub std_convention: String,
    pub n_cells: usize,
    pub n_cert: usize,
    pub n_arith_only: usize,
    pub cert_rate: Option<f64>,
    /// True when no cell is certified; agreement sections are then empty.
    pub empty: bool,
    pub backends: BTreeMap<String, Agreement>,
    pub pairs: BTreeMap<String, PairStats>,
    /// LP agreement under each dual aggregation.
    pub aggregation_ablation: BTreeMap<String, Agreement>,
    /// Fraction of certified cells adjudicated identically by all six
    /// norm and normalisation settings.
    pub adjudication_stability: Option<f64>,
    pub feasibility: FeasibilityStats,
    pub pac: PacStats,
}

fn agreement_for(cells: &[&CellRecord], column: &str, resamples: usize, seed: u64) -> AppResult<Option<Agreement>> {
    if cells.is_empty() || cells.iter().any(|c| c.top1(column).is_none()) {
        return Ok(None);
    }
    let outcomes: Vec<CellOutcome> = cells
        .iter()
        .map(|c| CellOutcome {
            seed: c.seed,
            certified: true,
            matches: BTreeMap::from([(column.to_string(), c.top1(column) == Some(c.cf_family.as_str()))]),
        })
        .collect();
    let s = summarize(&outcomes, &[column], 1, seed)?;
    let b = &s.backends[0];
    let hits: Vec<(bool, bool)> = outcomes.iter().map(|o| (o.matches[column], false)).collect();
    let ci = paired_bootstrap_ci(&hits, resamples, seed)?;
    Ok(Some(Agreement {
        mean: b.mean,
        std: b.std,
        pooled: b.pooled,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
        per_seed: b.per_seed.iter().map(|(s, v)| (s.to_string(), *v)).collect(),
    }))
}

pub fn stats_from_cells(header: &CellsHeader, cells: &[CellRecord]) -> AppResult<StatsFile> {
    let resamples = header.resamples;
    let seed = header.master_seed;
    let certified: Vec<&CellRecord> = cells.iter().filter(|c| c.certified()).collect();
    let mut out = StatsFile {
        schema_version: SCHEMA_VERSION,
        problem: header.problem.name().into(),
        std_convention: famattr_core::stats::STD_CONVENTION.into(),
        n_cells: cells.len(),
        n_cert: certified.len(),
        n_arith_only: cells.iter().filter(|c| c.cf_status == "arith_only").count(),
        cert_rate: (!cells.is_empty()).then(|| certified.len() as f64 / cells.len() as f64),
        empty: certified.is_empty(),
        backends: BTreeMap::new(),
        pairs: BTreeMap::new(),
        aggregation_ablation: BTreeMap::new(),
        adjudication_stability: None,
        feasibility: feasibility(cells),
        pac: pac_stats(cells),
    };
    if out.empty {
        return Ok(out);
    }
    let present: Vec<&str> = BACKENDS
        .iter()
        .copied()
        .filter(|b| certified.iter().all(|c| c.top1(b).is_some()))
        .collect();
    for b in &present {
        if let Some(a) = agreement_for(&certified, b, resamples, seed)? {
            out.backends.insert(b.to_string(), a);
        }
    }
    for (i, a) in present.iter().enumerate() {
        for b in &present[i + 1..] {
            let pairs: Vec<(bool, bool)> = certified
                .iter()
                .map(|c| (c.top1(a) == Some(&c.cf_family), c.top1(b) == Some(&c.cf_family)))
                .collect();
            let o = PairedOutcome::from_pairs(a, b, &pairs);
            let ci = paired_bootstrap_ci(&pairs, resamples, seed)?;
            out.pairs.insert(
                format!("{a}_vs_{b}"),
                PairStats {
                    diff: ci.diff,
                    ci_lo: ci.lo,
                    ci_hi: ci.hi,
                    b01: o.b01,
                    b10: o.b10,
                    both_right: o.both_right,
                    both_wrong: o.both_wrong,
                    p: mcnemar_exact(o.b01, o.b10),
                },
            );
        }
    }
    for (name, column) in [("mean", "lp"), ("sum", "lp-sum"), ("max", "lp-max")] {
        if let Some(a) = agreement_for(&certified, column, resamples, seed)? {
            out.aggregation_ablation.insert(name.into(), a);
        }
    }
    let stable = certified
        .iter()
        .filter(|c| {
            let mut it = c.cf_sweep.split(';');
            let first = it.next();
            it.all(|f| Some(f) == first)
        })
        .count();
    out.adjudication_stability = Some(stable as f64 / certified.len() as f64);
    Ok(out)
}

fn feasibility(cells: &[CellRecord]) -> FeasibilityStats {
    let cand: usize = cells.iter().map(|c| c.unc_candidates).sum();
    let flip: usize = cells.iter().map(|c| c.unc_flipping).sum();
    let pass: usize = cells.iter().map(|c| c.unc_flipping_arith).sum();
    // Every constrained winner passed the arithmetic filter to be kept.
    let winners = cells.iter().filter(|c| c.cf_status != "none").count();
    FeasibilityStats {
        unconstrained_candidates: cand,
        unconstrained_flipping: flip,
        unconstrained_flipping_arith: pass,
        unconstrained_pass_rate: (flip > 0).then(|| pass as f64 / flip as f64),
        constrained_pass_rate: (winners > 0).then_some(1.0),
    }
}

fn pac_stats(cells: &[CellRecord]) -> PacStats {
    let ks: Vec<usize> = cells.iter().filter_map(|c| c.pac_k).collect();
    let mut kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let diag = failure_diagnostics(cells.iter().map(|c| (c.pac_k.is_some(), c.margin)));
    PacStats {
        samples: cells.first().map_or(0, |c| c.pac_samples),
        succeeded: ks.len(),
        failed: cells.len() - ks.len(),
        per_test_succeeded: cells.iter().filter(|c| c.pac_k_per_test.is_some()).count(),
        mean_k: (!kf.is_empty()).then(|| mean_std(&kf).0),
        median_k: median(&mut kf),
        max_k: ks.iter().copied().max(),
        failed_median_margin: diag.failed_median,
        succeeded_median_margin: diag.succeeded_median,
    }
}

/// Plot-ready per-backend agreement bars.
pub fn figure_csv(stats: &StatsFile) -> String {
    let mut s = String::from("problem,backend,mean,std,pooled,ci_lo,ci_hi,n_cert\n");
    for b in BACKENDS {
        if let Some(a) = stats.backends.get(b) {
            let _ = writeln!(
                s,
                "{},{b},{},{},{},{},{},{}",
                stats.problem, a.mean, a.std, a.pooled, a.ci_lo, a.ci_hi, stats.n_cert
            );
        }
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

/// Human-readable tables.
pub fn render(stats: &StatsFile) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{}: {} cells, {} certified ({}), {} arithmetic-only",
        stats.problem,
        stats.n_cells,
        stats.n_cert,
        stats.cert_rate.map_or_else(|| "-".into(), |r| format!("{:.1}%", 100.0 * r)),
        stats.n_arith_only
    );
    if stats.empty {
        let _ = writeln!(s, "\nno certified cells: agreement is undefined");
    } else {
        let _ = writeln!(s, "\nagreement with the counterfactual family (std over seeds: {})", stats.std_convention);
        let _ = writeln!(s, "{:<10}{:>8}{:>8}{:>8}{:>18}", "backend", "mean", "std", "pooled", "95% CI");
        for b in BACKENDS {
            if let Some(a) = stats.backends.get(b) {
                let _ = writeln!(
                    s,
                    "{b:<10}{:>8.3}{:>8.3}{:>8.3}   [{:+.3}, {:+.3}]",
                    a.mean, a.std, a.pooled, a.ci_lo, a.ci_hi
                );
            }
        }
        let _ = writeln!(s, "\npaired comparisons (b01: first wrong, second right)");
        for (name, p) in &stats.pairs {
            let _ = writeln!(
                s,
                "{name:<18} diff {:+.3} [{:+.3}, {:+.3}]  b01={} b10={}  p={:.3e}",
                p.diff, p.ci_lo, p.ci_hi, p.b01, p.b10, p.p
            );
        }
        let _ = writeln!(s, "\nLP dual aggregation ablation");
        for (name, a) in &stats.aggregation_ablation {
            let _ = writeln!(s, "{name:<6} {:.3} +- {:.3}", a.mean, a.std);
        }
        let _ = writeln!(s, "\nadjudication stability over 6 settings: {}", opt(stats.adjudication_stability));
    }
    let f = &stats.feasibility;
    let _ = writeln!(
        s,
        "\nunconstrained flipping candidates passing arithmetic checks: {} of {} ({}); constrained winners: {}",
        f.unconstrained_flipping_arith,
        f.unconstrained_flipping,
        opt(f.unconstrained_pass_rate),
        opt(f.constrained_pass_rate)
    );
    let p = &stats.pac;
    let _ = writeln!(
        s,
        "PAC subsets (M={}): {} succeeded, {} failed, per-test budget {} succeeded; |S*| mean {} median {} max {}",
        p.samples,
        p.succeeded,
        p.failed,
        p.per_test_succeeded,
        opt(p.mean_k),
        opt(p.median_k),
        p.max_k.map_or_else(|| "-".into(), |k| k.to_string())
    );
    let _ = writeln!(
        s,
        "logit margin median: failed {} vs succeeded {}",
        opt(p.failed_median_margin),
        opt(p.succeeded_median_margin)
    );
    s
}
