//! Sample-and-verify counterfactuals.
//!
//! Each shot perturbs exactly one feature key (round robin over the
//! configured keys) with a truncated Gaussian. Candidates that pass the
//! arithmetic check and flip the greedy action compete on L1 mass; the
//! winner is then certified by the complete feasibility search.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csp::{arithmetic_feasible, csp_feasible, Clock, VerdictStatus};
use crate::env::{replay, PolicyState};
use crate::instances::{
    ConstraintFamily, Instance, Problem, BUDGET, CAPACITY, COORDS, DEMAND, ELIGIBLE_COUNT, PRIZE, PROC_TIME, SERVICE,
    WINDOWS,
};
use crate::policy::{forward, PolicyParams};
use crate::rng::Stream;
use crate::{Error, Result};

/// Draws beyond the box before a coordinate is clamped.
pub const MAX_REJECTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::Linf];

    pub fn name(self) -> &'static str {
        match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Linf => "linf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "linf" => Ok(Self::Linf),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySpec {
    pub key: String,
    /// Per-entry L-infinity bound.
    pub rho: f64,
    /// Per-entry standard deviation.
    pub sigma: f64,
}

impl KeySpec {
    pub fn new(key: &str, rho: f64, sigma: f64) -> Self {
        Self {
            key: key.into(),
            rho,
            sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    pub shots: usize,
    pub keys: Vec<KeySpec>,
    pub time_limit_ms: f64,
    pub norm: Norm,
    pub dim_normalize: bool,
}

impl CfConfig {
    /// Every feature key, with bounds in the natural units of each field.
    pub fn defaults(problem: Problem) -> Self {
        let keys = match problem {
            Problem::Cvrptw => alloc::vec![
                KeySpec::new(CAPACITY, 0.3, 0.1),
                KeySpec::new(COORDS, 0.2, 0.05),
                KeySpec::new(DEMAND, 0.3, 0.1),
                KeySpec::new(SERVICE, 0.1, 0.05),
                KeySpec::new(WINDOWS, 0.5, 0.2),
            ],
            Problem::Op => alloc::vec![
                KeySpec::new(BUDGET, 0.5, 0.2),
                KeySpec::new(COORDS, 0.2, 0.05),
                KeySpec::new(PRIZE, 0.5, 0.2),
            ],
            Problem::Fjsp => alloc::vec![KeySpec::new(ELIGIBLE_COUNT, 1.5, 0.5), KeySpec::new(PROC_TIME, 3.0, 1.0)],
        };
        Self {
            shots: 128,
            keys,
            time_limit_ms: 500.0,
            norm: Norm::L1,
            dim_normalize: true,
        }
    }

    /// Overrides every key's bound and std.
    pub fn with_uniform_box(mut self, rho: Option<f64>, sigma: Option<f64>) -> Self {
        for k in &mut self.keys {
            if let Some(r) = rho {
                k.rho = r;
            }
            if let Some(s) = sigma {
                k.sigma = s;
            }
        }
        self
    }

    pub fn validate(&self, instance: &Instance) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("counterfactual shots must be at least 1".into()));
        }
        if self.keys.is_empty() {
            return Err(Error::Config("no perturbable feature keys".into()));
        }
        if !(self.time_limit_ms > 0.0) {
            return Err(Error::Config("certification time limit must be positive".into()));
        }
        for k in &self.keys {
            if !(k.rho > 0.0 && k.sigma > 0.0 && k.rho.is_finite() && k.sigma.is_finite()) {
                return Err(Error::Config(format!("rho and sigma for `{}` must be positive", k.key)));
            }
            if !instance.tensors.contains_key(&k.key) {
                return Err(Error::Config(format!("perturbation key `{}` is not an instance tensor", k.key)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfStatus {
    /// Flipping, arithmetic-feasible and accepted by the complete search.
    Certified,
    /// A winner existed but certification failed or timed out.
    ArithOnly,
    /// No flipping arithmetic-feasible candidate.
    None,
}

impl CfStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Certified => "certified",
            Self::ArithOnly => "arith_only",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "certified" => Ok(Self::Certified),
            "arith_only" => Ok(Self::ArithOnly),
            "none" => Ok(Self::None),
            other => Err(Error::Schema(format!("unknown certification status `{other}`"))),
        }
    }
}

/// Perturbation mass restricted to one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMass {
    pub family: String,
    pub dim: usize,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl FamilyMass {
    pub fn value(&self, norm: Norm, dim_normalize: bool) -> f64 {
        let v = match norm {
            Norm::L1 => self.l1,
            Norm::L2 => self.l2,
            Norm::Linf => self.linf,
        };
        if dim_normalize {
            v / self.dim as f64
        } else {
            v
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub step: usize,
    pub original_action: usize,
    /// Perturbed key and its dense delta; empty when no winner exists.
    pub key: Option<String>,
    pub zeta: Vec<f64>,
    pub l1: f64,
    pub flipped_action: Option<usize>,
    pub status: CfStatus,
    pub verdict: Option<VerdictStatus>,
    pub masses: Vec<FamilyMass>,
    pub shot: Option<usize>,
}

impl Counterfactual {
    /// The perturbed instance.
    pub fn apply(&self, instance: &Instance) -> Result<Option<Instance>> {
        match &self.key {
            Some(k) => instance.perturbed(k, &self.zeta).map(Some),
            None => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub shot: usize,
    pub key: String,
    pub l1: f64,
    pub flipped: bool,
    pub arith: bool,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSearch {
    pub cf: Counterfactual,
    pub log: Vec<Candidate>,
}

fn truncated(rng: &mut Stream, sigma: f64, rho: f64, len: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    (0..len)
        .map(|_| {
            let mut z = normal.sample(rng);
            let mut tries = 1;
            while libm::fabs(z) > rho && tries <= MAX_REJECTS {
                z = normal.sample(rng);
                tries += 1;
            }
            z.clamp(-rho, rho)
        })
        .collect()
}

/// Greedy action at the same step of the perturbed instance, or `None`
/// when the prefix no longer replays there.
pub fn perturbed_argmax(params: &PolicyParams, perturbed: &Instance, prefix: &[usize]) -> Option<usize> {
    let s = replay(perturbed, prefix).ok()?;
    forward(params, &s).ok().map(|d| d.argmax)
}

struct Shot {
    key_index: usize,
    zeta: Vec<f64>,
    l1: f64,
    flipped_to: Option<usize>,
    arith: bool,
}

fn draw_shot(
    params: &PolicyParams,
    state: &PolicyState<'_>,
    original: usize,
    config: &CfConfig,
    m: usize,
    rng: &mut Stream,
) -> Result<Shot> {
    let key_index = m % config.keys.len();
    let spec = &config.keys[key_index];
    let len = state.instance.tensor(&spec.key)?.len();
    let zeta = truncated(rng, spec.sigma, spec.rho, len);
    let l1 = zeta.iter().map(|z| libm::fabs(*z)).sum();
    let perturbed = state.instance.perturbed(&spec.key, &zeta)?;
    let arith = arithmetic_feasible(&perturbed);
    let flipped_to = perturbed_argmax(params, &perturbed, &state.prefix).filter(|&a| a != original);
    Ok(Shot {
        key_index,
        zeta,
        l1,
        flipped_to,
        arith,
    })
}

/// Per-family masses of a single-key perturbation.
pub fn family_masses(instance: &Instance, key: &str, zeta: &[f64]) -> Result<Vec<FamilyMass>> {
    instance
        .families
        .iter()
        .map(|f| {
            let dim = instance.family_dimension(f)?;
            let touched = f.feature_keys.iter().any(|k| k == key);
            let (l1, l2, linf) = if touched {
                (
                    zeta.iter().map(|z| libm::fabs(*z)).sum(),
                    libm::sqrt(zeta.iter().map(|z| z * z).sum()),
                    zeta.iter().map(|z| libm::fabs(*z)).fold(0.0, f64::max),
                )
            } else {
                (0.0, 0.0, 0.0)
            };
            Ok(FamilyMass {
                family: f.name.clone(),
                dim,
                l1,
                l2,
                linf,
            })
        })
        .collect()
}

pub fn search_cell<C: Clock>(
    params: &PolicyParams,
    state: &PolicyState<'_>,
    config: &CfConfig,
    clock: &C,
    rng: &mut Stream,
) -> Result<CellSearch> {
    config.validate(state.instance)?;
    let original = forward(params, state)?.argmax;
    let mut log = Vec::with_capacity(config.shots);
    let mut best: Option<(usize, Shot)> = None;
    for m in 1..=config.shots {
        let shot = draw_shot(params, state, original, config, m, rng)?;
        let kept = shot.arith && shot.flipped_to.is_some() && best.as_ref().is_none_or(|(_, b)| shot.l1 < b.l1);
        log.push(Candidate {
            shot: m,
            key: config.keys[shot.key_index].key.clone(),
            l1: shot.l1,
            flipped: shot.flipped_to.is_some(),
            arith: shot.arith,
            kept,
        });
        if kept {
            best = Some((m, shot));
        }
    }
    let mut cf = Counterfactual {
        step: state.step,
        original_action: original,
        key: None,
        zeta: Vec::new(),
        l1: 0.0,
        flipped_action: None,
        status: CfStatus::None,
        verdict: None,
        masses: Vec::new(),
        shot: None,
    };
    if let Some((m, shot)) = best {
        let key = config.keys[shot.key_index].key.clone();
        let perturbed = state.instance.perturbed(&key, &shot.zeta)?;
        let verdict = csp_feasible(&perturbed, config.time_limit_ms, clock)?;
        cf.status = if verdict.status == VerdictStatus::Feasible {
            CfStatus::Certified
        } else {
            CfStatus::ArithOnly
        };
        cf.verdict = Some(verdict.status);
        cf.masses = family_masses(state.instance, &key, &shot.zeta)?;
        cf.key = Some(key);
        cf.l1 = shot.l1;
        cf.zeta = shot.zeta;
        cf.flipped_action = shot.flipped_to;
        cf.shot = Some(m);
    }
    Ok(CellSearch { cf, log })
}

/// Family with the largest perturbation mass; the lexicographically
/// smallest name wins ties.
pub fn adjudicate(cf: &Counterfactual, norm: Norm, dim_normalize: bool) -> Result<String> {
    if cf.status != CfStatus::Certified {
        return Err(Error::Contract(format!(
            "cannot adjudicate a `{}` counterfactual",
            cf.status.name()
        )));
    }
    let scores: Vec<(String, f64)> = cf
        .masses
        .iter()
        .map(|m| (m.family.clone(), m.value(norm, dim_normalize)))
        .collect();
    crate::attribution::top1(&scores)
        .map(String::from)
        .ok_or_else(|| Error::Contract("counterfactual carries no family masses".into()))
}

/// Adjudications under every norm and normalisation, in
/// `(norm, dim_normalize)` order with `false` first.
pub fn adjudication_sweep(cf: &Counterfactual) -> Result<Vec<(Norm, bool, String)>> {
    let mut out = Vec::new();
    for norm in Norm::ALL {
        for dn in [false, true] {
            out.push((norm, dn, adjudicate(cf, norm, dn)?));
        }
    }
    Ok(out)
}

/// Re-checks a certified counterfactual from scratch.
pub fn verify_certificate<C: Clock>(
    params: &PolicyParams,
    instance: &Instance,
    prefix: &[usize],
    cf: &Counterfactual,
    config: &CfConfig,
    clock: &C,
) -> Result<bool> {
    if cf.status != CfStatus::Certified {
        return Ok(false);
    }
    let Some(key) = &cf.key else { return Ok(false) };
    let Some(spec) = config.keys.iter().find(|k| &k.key == key) else {
        return Ok(false);
    };
    if cf.zeta.iter().any(|z| libm::fabs(*z) > spec.rho) {
        return Ok(false);
    }
    let original = forward(params, &replay(instance, prefix)?)?.argmax;
    let perturbed = instance.perturbed(key, &cf.zeta)?;
    let flipped = perturbed_argmax(params, &perturbed, prefix).is_some_and(|a| a != original);
    let feasible = csp_feasible(&perturbed, config.time_limit_ms, clock)?.status == VerdictStatus::Feasible;
    Ok(flipped && arithmetic_feasible(&perturbed) && feasible)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub candidates: usize,
    pub flipping: usize,
    pub flipping_arith: usize,
}

impl BaselineStats {
    /// Arithmetic pass rate among flipping candidates.
    pub fn pass_rate(&self) -> Option<f64> {
        (self.flipping > 0).then(|| self.flipping_arith as f64 / self.flipping as f64)
    }

    pub fn merge(&mut self, other: &BaselineStats) {
        self.candidates += other.candidates;
        self.flipping += other.flipping;
        self.flipping_arith += other.flipping_arith;
    }
}

/// Same sampler, no feasibility filter: counts how many flipping
/// candidates would have survived the arithmetic check.
pub fn unconstrained_baseline(
    params: &PolicyParams,
    state: &PolicyState<'_>,
    config: &CfConfig,
    rng: &mut Stream,
) -> Result<BaselineStats> {
    config.validate(state.instance)?;
    let original = forward(params, state)?.argmax;
    let mut stats = BaselineStats {
        candidates: 0,
        flipping: 0,
        flipping_arith: 0,
    };
    for m in 1..=config.shots {
        let shot = draw_shot(params, state, original, config, m, rng)?;
        stats.candidates += 1;
        if shot.flipped_to.is_some() {
            stats.flipping += 1;
            stats.flipping_arith += usize::from(shot.arith);
        }
    }
    Ok(stats)
}

/// Families whose keys include `key`.
pub fn owners<'a>(families: &'a [ConstraintFamily], key: &str) -> impl Iterator<Item = &'a str> {
    let key = String::from(key);
    families
        .iter()
        .filter(move |f| f.feature_keys.iter().any(|k| k.as_str() == key))
        .map(|f| f.name.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csp::NodeClock;
    use crate::env::initial_state;
    use crate::instances::{generate, GeneratorConfig};
    use crate::rng;

    fn setup(cfg: GeneratorConfig) -> (Instance, PolicyParams) {
        let inst = generate(&cfg).unwrap();
        let params = PolicyParams::for_instance(&inst, 8, 11);
        (inst, params)
    }

    #[test]
    fn winner_is_minimal_among_logged_candidates() {
        let clock = NodeClock::default();
        for seed in 0..6 {
            let (inst, params) = setup(GeneratorConfig::cvrptw(8, seed));
            let state = initial_state(&inst);
            let cfg = CfConfig::defaults(Problem::Cvrptw);
            let mut rng = rng::stream(seed, &[rng::purpose::COUNTERFACTUAL]);
            let out = search_cell(&params, &state, &cfg, &clock, &mut rng).unwrap();
            let eligible: Vec<&Candidate> = out.log.iter().filter(|c| c.flipped && c.arith).collect();
            match out.cf.status {
                CfStatus::None => assert!(eligible.is_empty()),
                _ => {
                    let min = eligible.iter().map(|c| c.l1).fold(f64::INFINITY, f64::min);
                    assert_eq!(out.cf.l1, min);
                    let first = eligible.iter().find(|c| c.l1 == min).unwrap();
                    assert_eq!(out.cf.shot, Some(first.shot));
                }
            }
            assert_eq!(out.log.len(), 128);
            for (i, c) in out.log.iter().enumerate() {
                assert_eq!(c.key, cfg.keys[(i + 1) % cfg.keys.len()].key);
            }
        }
    }

    #[test]
    fn certified_outputs_reverify_and_stay_in_the_box() {
        let clock = NodeClock::default();
        let mut certified = 0;
        for seed in 0..8 {
            for cfg in [GeneratorConfig::op(7, seed), GeneratorConfig::fjsp(2, 2, seed)] {
                let (inst, params) = setup(cfg);
                let state = initial_state(&inst);
                let cf_cfg = CfConfig::defaults(inst.problem);
                let mut rng = rng::stream(seed, &[rng::purpose::COUNTERFACTUAL, 1]);
                let out = search_cell(&params, &state, &cf_cfg, &clock, &mut rng).unwrap();
                if out.cf.status == CfStatus::Certified {
                    certified += 1;
                    assert!(verify_certificate(&params, &inst, &[], &out.cf, &cf_cfg, &clock).unwrap());
                    let owner = owners(&inst.families, out.cf.key.as_deref().unwrap()).next().unwrap();
                    for (_, _, fam) in adjudication_sweep(&out.cf).unwrap() {
                        assert_eq!(fam, owner);
                    }
                }
            }
        }
        assert!(certified > 0);
    }

    #[test]
    fn deterministic_and_monotone_in_shots() {
        let clock = NodeClock::default();
        let (inst, params) = setup(GeneratorConfig::cvrptw(8, 4));
        let state = initial_state(&inst);
        let mut cfg = CfConfig::defaults(Problem::Cvrptw);
        let run = |cfg: &CfConfig| {
            let mut rng = rng::stream(9, &[rng::purpose::COUNTERFACTUAL]);
            search_cell(&params, &state, cfg, &clock, &mut rng).unwrap()
        };
        let a = run(&cfg);
        assert_eq!(a, run(&cfg));
        let mut prev = f64::INFINITY;
        for shots in [8, 32, 128] {
            cfg.shots = shots;
            let best = run(&cfg)
                .log
                .iter()
                .filter(|c| c.flipped && c.arith)
                .map(|c| c.l1)
                .fold(f64::INFINITY, f64::min);
            assert!(best <= prev);
            prev = best;
        }
    }

    #[test]
    fn adjudication_normalisation_example() {
        let cf = Counterfactual {
            step: 0,
            original_action: 0,
            key: Some("a".into()),
            zeta: Vec::new(),
            l1: 5.0,
            flipped_action: Some(1),
            status: CfStatus::Certified,
            verdict: Some(VerdictStatus::Feasible),
            masses: alloc::vec![
                FamilyMass {
                    family: "A".into(),
                    dim: 3,
                    l1: 3.0,
                    l2: 3.0,
                    linf: 3.0
                },
                FamilyMass {
                    family: "B".into(),
                    dim: 1,
                    l1: 2.0,
                    l2: 2.0,
                    linf: 2.0
                },
            ],
            shot: Some(1),
        };
        assert_eq!(adjudicate(&cf, Norm::L1, false).unwrap(), "A");
        assert_eq!(adjudicate(&cf, Norm::L1, true).unwrap(), "B");
        let mut arith = cf.clone();
        arith.status = CfStatus::ArithOnly;
        assert!(matches!(adjudicate(&arith, Norm::L1, true), Err(Error::Contract(_))));
    }

    #[test]
    fn tiny_box_never_breaks_arithmetic() {
        let (inst, params) = setup(GeneratorConfig::cvrptw(8, 2));
        let state = initial_state(&inst);
        let cfg = CfConfig::defaults(Problem::Cvrptw).with_uniform_box(Some(1e-4), Some(1e-4));
        let mut rng = rng::stream(3, &[rng::purpose::UNCONSTRAINED]);
        let stats = unconstrained_baseline(&params, &state, &cfg, &mut rng).unwrap();
        assert_eq!(stats.candidates, 128);
        assert!(stats.pass_rate().is_none_or(|r| r == 1.0));
    }

    #[test]
    fn truncation_respects_box() {
        let mut rng = rng::stream(1, &[0]);
        let z = truncated(&mut rng, 10.0, 0.1, 500);
        assert!(z.iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn config_validation() {
        let inst = generate(&GeneratorConfig::op(5, 0)).unwrap();
        let mut cfg = CfConfig::defaults(Problem::Op);
        assert!(cfg.validate(&inst).is_ok());
        cfg.shots = 0;
        assert!(cfg.validate(&inst).is_err());
        let mut cfg = CfConfig::defaults(Problem::Op);
        cfg.keys.push(KeySpec::new("demand", 0.1, 0.1));
        assert!(cfg.validate(&inst).is_err());
        let cfg = CfConfig::defaults(Problem::Op).with_uniform_box(Some(-1.0), None);
        assert!(cfg.validate(&inst).is_err());
    }
}
