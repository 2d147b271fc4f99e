//! `famattr` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use famattr_core::attribution::Backend;
use famattr_core::counterfactual::Norm;
use famattr_core::lp::Aggregation;
use famattr_core::Problem;

use crate::config::{default_output_root, Overrides, RunConfig};
use crate::error::{AppError, AppResult};
use crate::formats::{read_json, require};
use crate::report::{render, StatsFile};
use crate::{pipeline, stages};

#[derive(Debug, Parser)]
#[command(name = "famattr", version, about = "Constraint-family attribution for neural CO policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded instances and the config they came from.
    Generate(StageArgs),
    /// Train (or initialise) one policy per seed.
    Train {
        #[command(flatten)]
        stage: StageArgs,
        /// REINFORCE episodes; 0 keeps the seeded initialisation.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Per-cell Lambda vectors and top-1 families.
    Attribute {
        #[command(flatten)]
        stage: StageArgs,
        /// Also write each instance's LP relaxation in text form here.
        #[arg(long)]
        dump_lp: Option<PathBuf>,
    },
    /// Certified counterfactual search per cell.
    Counterfactual(StageArgs),
    /// Greedy PAC sufficient subsets along the attribution orderings.
    PacSubset(StageArgs),
    /// Recompute stats.json from the cells.csv of existing run directories.
    Adjudicate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the tables of existing run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Full pipeline into one run directory.
    Run(StageArgs),
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Run config, or a manifest.json whose config is reused.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Problem used when no config is given.
    #[arg(long, value_parser = parse_problem)]
    pub problem: Option<Problem>,
    /// Output (work) directory; defaults to `<output root>/<problem>`, root from `FAMATTR_OUT`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single seed; shorthand for `--seeds <s>`.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Instances per seed (B).
    #[arg(long)]
    pub instances: Option<usize>,
    /// Steps per instance (T).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub kmax: Option<usize>,
    /// Noise scale of the PAC resampling.
    #[arg(long)]
    pub pac_sigma: Option<f64>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Perturbation box radius, applied to every key.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Perturbation noise scale, applied to every key.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_parser = parse_aggregation)]
    pub aggregation: Option<Aggregation>,
    /// Backends to run; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', value_parser = parse_backend)]
    pub backend: Option<Vec<Backend>>,
    #[arg(long, value_parser = parse_norm)]
    pub norm: Option<Norm>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub dim_normalize: Option<bool>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_problem(s: &str) -> Result<Problem, String> {
    Problem::parse(&s.to_uppercase()).map_err(|e| e.to_string())
}
fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    Aggregation::parse(s).map_err(|e| e.to_string())
}
fn parse_backend(s: &str) -> Result<Backend, String> {
    Backend::parse(s).map_err(|e| e.to_string())
}
fn parse_norm(s: &str) -> Result<Norm, String> {
    Norm::parse(s).map_err(|e| e.to_string())
}

impl StageArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            eps: self.eps,
            delta: self.delta,
            kmax: self.kmax,
            pac_sigma: self.pac_sigma,
            shots: self.shots,
            rho: self.rho,
            sigma: self.sigma,
            aggregation: self.aggregation,
            backends: self.backend.clone(),
            norm: self.norm,
            dim_normalize: self.dim_normalize,
            seeds: self.seed.map(|s| vec![s]).or_else(|| self.seeds.clone()),
            instances: self.instances,
            steps: self.steps,
            workers: self.workers,
            output: self.out.clone(),
        }
    }

    /// Config from `--config`, else from `--problem` defaults.
    fn fresh_config(&self) -> AppResult<RunConfig> {
        let mut cfg = match (&self.config, self.problem) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(p)) => RunConfig::defaults(p),
            (None, None) => return Err(AppError::Config("pass --config or --problem".into())),
        };
        if let Some(p) = self.problem {
            if p != cfg.problem {
                return Err(AppError::Config(format!(
                    "--problem {} contradicts the config's {}",
                    p.name(),
                    cfg.problem.name()
                )));
            }
        }
        self.overrides().apply(&mut cfg);
        Ok(cfg)
    }

    fn work_dir(&self) -> AppResult<PathBuf> {
        match (&self.out, self.problem) {
            (Some(d), _) => Ok(d.clone()),
            (None, Some(p)) => Ok(default_output_root().join(p.name().to_lowercase())),
            (None, None) => Err(AppError::Config("pass --out or --problem to locate the work directory".into())),
        }
    }

    /// Config stored in the work directory, with flag overrides.
    fn stored_config(&self) -> AppResult<(RunConfig, PathBuf)> {
        let dir = self.work_dir()?;
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => stages::load_config(&dir)?,
        };
        self.overrides().apply(&mut cfg);
        cfg.output = dir.clone();
        Ok((cfg, dir))
    }
}

fn load_stats(dir: &Path) -> AppResult<StatsFile> {
    let path = dir.join("stats.json");
    require(&path, "run `famattr run` or `famattr adjudicate` on this directory first")?;
    read_json(&path)
}

/// Runs one command, returning what it printed.
pub fn execute(cli: Cli) -> AppResult<String> {
    match cli.command {
        Command::Generate(args) => {
            let mut cfg = args.fresh_config()?;
            cfg.output = args.out.clone().unwrap_or(cfg.output);
            let files = stages::generate(&cfg, &cfg.output)?;
            Ok(format!("wrote {} instances to {}", files.len(), cfg.output.display()))
        }
        Command::Train { stage, episodes } => {
            let (mut cfg, dir) = stage.stored_config()?;
            if let Some(e) = episodes {
                cfg.train_episodes = e;
            }
            cfg.checkpoint = None;
            let files = stages::train(&cfg, &dir)?;
            Ok(format!("wrote {} policies to {}", files.len(), dir.join("policies").display()))
        }
        Command::Attribute { stage, dump_lp } => {
            let (cfg, dir) = stage.stored_config()?;
            let n = stages::attribute_stage(&cfg, &dir, dump_lp.as_deref())?;
            Ok(format!("wrote {n} rows to {}", dir.join(stages::ATTRIBUTION_FILE).display()))
        }
        Command::Counterfactual(stage) => {
            let (cfg, dir) = stage.stored_config()?;
            let n = stages::counterfactual_stage(&cfg, &dir)?;
            Ok(format!("searched {n} cells into {}", dir.join("counterfactuals.json").display()))
        }
        Command::PacSubset(stage) => {
            let (cfg, dir) = stage.stored_config()?;
            let n = stages::pac_stage(&cfg, &dir)?;
            Ok(format!("wrote {n} rows to {}", dir.join(stages::PAC_FILE).display()))
        }
        Command::Adjudicate { runs } => {
            let mut out = String::new();
            for dir in runs {
                let stats = pipeline::adjudicate_dir(&dir)?;
                out.push_str(&format!("== {}\n{}", dir.display(), render(&stats)));
            }
            Ok(out)
        }
        Command::Report { runs } => {
            let mut out = String::new();
            for dir in runs {
                out.push_str(&format!("== {}\n{}", dir.display(), render(&load_stats(&dir)?)));
            }
            Ok(out)
        }
        Command::Run(args) => {
            let cfg = args.fresh_config()?;
            let run = pipeline::run(&cfg)?;
            Ok(format!(
                "{} cells ({} certified) in {}\n{}",
                run.cells.len(),
                run.stats.n_cert,
                run.dir.display(),
                render(&run.stats)
            ))
        }
    }
}
