//! Run configuration: one JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use famattr_core::attribution::Backend;
use famattr_core::counterfactual::{CfConfig, Norm};
use famattr_core::lp::Aggregation;
use famattr_core::pac::PacConfig;
use famattr_core::{GeneratorConfig, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FAMATTR_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    /// Routing node count including the depot.
    pub nodes: usize,
    pub jobs: usize,
    pub machines: usize,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    /// Instances per seed.
    pub instances: usize,
    /// Decoding steps explained per instance.
    pub steps: usize,
    pub embed_dim: usize,
    /// REINFORCE episodes per seed when no checkpoint is given.
    pub train_episodes: usize,
    /// Policy checkpoint used for every seed instead of training.
    pub checkpoint: Option<PathBuf>,
    pub backends: Vec<Backend>,
    pub aggregation: Aggregation,
    pub subgrad_iterations: usize,
    pub cf: CfConfig,
    pub pac: PacConfig,
    pub bootstrap_resamples: usize,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub log_candidates: bool,
    pub output: PathBuf,
}

impl RunConfig {
    /// Desk-scale defaults for `problem`.
    pub fn defaults(problem: Problem) -> Self {
        let (nodes, jobs, machines) = match problem {
            Problem::Cvrptw => (10, 0, 0),
            Problem::Op => (8, 0, 0),
            Problem::Fjsp => (0, 3, 2),
        };
        Self {
            problem,
            nodes,
            jobs,
            machines,
            master_seed: 0,
            seeds: vec![0, 1, 2],
            instances: 16,
            steps: 8,
            embed_dim: 16,
            train_episodes: 500,
            checkpoint: None,
            backends: Backend::ALL.to_vec(),
            aggregation: Aggregation::Mean,
            subgrad_iterations: 200,
            cf: CfConfig::defaults(problem),
            pac: PacConfig::default(),
            bootstrap_resamples: 10_000,
            workers: 0,
            log_candidates: true,
            output: default_output_root().join(problem.name().to_lowercase()),
        }
    }

    pub fn generator(&self, seed: u64) -> GeneratorConfig {
        match self.problem {
            Problem::Cvrptw => GeneratorConfig::cvrptw(self.nodes, seed),
            Problem::Op => GeneratorConfig::op(self.nodes, seed),
            Problem::Fjsp => GeneratorConfig::fjsp(self.jobs, self.machines, seed),
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: &str| Err(AppError::Config(m.into()));
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        if self.instances == 0 || self.steps == 0 {
            return bad("instances per seed and steps per instance must be at least 1");
        }
        if self.embed_dim == 0 {
            return bad("embedding width must be at least 1");
        }
        if self.backends.is_empty() {
            return bad("no attribution backend selected");
        }
        if self.subgrad_iterations == 0 {
            return bad("subgradient iterations must be at least 1");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap resamples must be at least 1");
        }
        let mut seen = self.backends.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.backends.len() {
            return bad("backend listed twice");
        }
        self.generator(0).validate()?;
        self.pac.validate()?;
        let probe = famattr_core::instances::generate(&self.generator(0))?;
        self.cf.validate(&probe)?;
        if let Some(c) = &self.checkpoint {
            crate::formats::require(c, "train a policy with `famattr train` or drop `checkpoint`")?;
        }
        Ok(())
    }

    /// Reads a config file, or the `config` member of a run manifest.
    pub fn load(path: &Path) -> AppResult<Self> {
        crate::formats::require(path, "pass an existing config or manifest file")?;
        let value: serde_json::Value = crate::formats::read_json(path)?;
        let inner = match value.get("config") {
            Some(c) if value.get("schema_version").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Command-line overrides, named after the symbols they set.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub kmax: Option<usize>,
    pub pac_sigma: Option<f64>,
    pub shots: Option<usize>,
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
    pub aggregation: Option<Aggregation>,
    pub backends: Option<Vec<Backend>>,
    pub norm: Option<Norm>,
    pub dim_normalize: Option<bool>,
    pub seeds: Option<Vec<u64>>,
    pub instances: Option<usize>,
    pub steps: Option<usize>,
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src.clone() {
                    cfg.$($dst)+ = v;
                }
            };
        }
        set!(eps => pac.eps);
        set!(delta => pac.delta);
        set!(kmax => pac.k_max);
        set!(pac_sigma => pac.sigma);
        set!(shots => cf.shots);
        set!(aggregation => aggregation);
        set!(backends => backends);
        set!(norm => cf.norm);
        set!(dim_normalize => cf.dim_normalize);
        set!(seeds => seeds);
        set!(instances => instances);
        set!(steps => steps);
        set!(workers => workers);
        set!(output => output);
        cfg.cf = cfg.cf.clone().with_uniform_box(self.rho, self.sigma);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for p in Problem::ALL {
            RunConfig::defaults(p).validate().unwrap();
        }
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = RunConfig::defaults(Problem::Op);
        Overrides {
            eps: Some(0.1),
            rho: Some(0.05),
            shots: Some(4),
            norm: Some(Norm::Linf),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.pac.eps, 0.1);
        assert_eq!(cfg.cf.shots, 4);
        assert_eq!(cfg.cf.norm, Norm::Linf);
        assert!(cfg.cf.keys.iter().all(|k| k.rho == 0.05));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = RunConfig::defaults(Problem::Cvrptw);
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(AppError::Config(_))));
        let mut cfg = RunConfig::defaults(Problem::Cvrptw);
        cfg.pac.eps = 1.5;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::defaults(Problem::Cvrptw);
        cfg.checkpoint = Some("/nonexistent/ckpt.json".into());
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 3);
    }
}
