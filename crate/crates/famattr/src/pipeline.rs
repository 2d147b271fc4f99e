//! The seeded experiment pipeline.
//!
//! Work is split per (seed, instance); each task rolls out the greedy policy
//! and explains its first `steps` decisions. Every random draw comes from a
//! stream keyed by (seed, purpose, instance, step), so output does not depend
//! on the worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use famattr_core::attribution::{attribute, proxy_lambda, subgrad_lambda, top1, AttributionResult, Backend};
use famattr_core::counterfactual::{
    adjudicate, adjudication_sweep, search_cell, unconstrained_baseline, CellSearch, CfStatus,
};
use famattr_core::env::{initial_state, PolicyState};
use famattr_core::instances::{generate, Instance};
use famattr_core::lp::{build_lp, solve_with_duals, Aggregation};
use famattr_core::pac::{baseline_values, greedy_subset, PacConfig, PacSubsetResult};
use famattr_core::policy::{forward, grad_log_prob, train_reinforce, PolicyParams, TrainLog, TrainOptions};
use famattr_core::rng::{self, purpose};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{write_candidates, write_cells, CandidateRow, CellRecord, CellsHeader, SCHEMA_VERSION};
use crate::clock::WallClock;
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::formats::{join_list, join_named, read_json, write_file, write_json, Checkpoint, DualRecord};
use crate::report::{figure_csv, stats_from_cells, StatsFile};

/// Stream root of `seed` under the run's master seed.
pub fn seed_key(cfg: &RunConfig, seed: u64) -> u64 {
    rng::mix(cfg.master_seed, &[seed])
}

/// Seeded initial policy, trained when `episodes > 0`.
pub fn seed_policy(cfg: &RunConfig, seed: u64) -> AppResult<(PolicyParams, Option<TrainLog>)> {
    if let Some(path) = &cfg.checkpoint {
        let ck: Checkpoint = read_json(path)?;
        ck.check(path)?;
        if ck.params.problem != cfg.problem {
            return Err(AppError::Config(format!(
                "checkpoint {} is for {}",
                path.display(),
                ck.params.problem.name()
            )));
        }
        return Ok((ck.params, ck.training));
    }
    let key = seed_key(cfg, seed);
    let generator = cfg.generator(rng::mix(key, &[purpose::TRAIN]));
    let init = PolicyParams::init(cfg.problem, cfg.embed_dim, cfg.machines, rng::mix(key, &[purpose::INIT]));
    if cfg.train_episodes == 0 {
        return Ok((init, None));
    }
    let (p, log) = train_reinforce(&init, &generator, cfg.train_episodes, key, &TrainOptions::default())?;
    Ok((p, Some(log)))
}

pub fn seed_instance(cfg: &RunConfig, seed: u64, index: usize) -> famattr_core::Result<Instance> {
    generate(&cfg.generator(rng::mix(seed_key(cfg, seed), &[purpose::GENERATE, index as u64])))
}

/// Everything computed for one cell, kept in memory for auditing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellArtifact {
    pub seed: u64,
    pub instance: usize,
    pub prefix: Vec<usize>,
    pub action: usize,
    pub attributions: Vec<AttributionResult>,
    pub search: CellSearch,
    pub pac: PacSubsetResult,
}

/// λ vectors of one instance.
type InstanceOutput = (Instance, Vec<(CellRecord, CellArtifact)>, InstanceDuals);

pub struct InstanceDuals {
    pub lp: Option<(Vec<(String, f64)>, DualRecord)>,
    pub subgrad: Option<Vec<(String, f64)>>,
}

pub fn instance_duals(cfg: &RunConfig, seed: u64, index: usize, inst: &Instance) -> AppResult<InstanceDuals> {
    let lp = if cfg.backends.contains(&Backend::Lp) {
        let (duals, _) = solve_with_duals(&build_lp(inst), &inst.families, cfg.aggregation)?;
        let record = DualRecord::new(seed, index, &duals, &inst.families)?;
        Some((duals.lambda, record))
    } else {
        None
    };
    let subgrad = if cfg.backends.contains(&Backend::Subgrad) {
        Some(subgrad_lambda(inst, cfg.subgrad_iterations, 1.0)?.lambda)
    } else {
        None
    };
    Ok(InstanceDuals { lp, subgrad })
}

fn pac_for(
    cfg: &RunConfig,
    params: &PolicyParams,
    state: &PolicyState<'_>,
    ordering: &[usize],
    pac: &PacConfig,
    seed: u64,
    index: usize,
) -> AppResult<PacSubsetResult> {
    let base = baseline_values(state, pac.baseline, &cfg.generator(seed));
    let mut stream = rng::stream(seed_key(cfg, seed), &[purpose::PAC, index as u64, state.step as u64]);
    Ok(greedy_subset(params, state, ordering, pac, &base, &mut stream)?)
}

/// Explains one decoding step.
pub fn explain_cell(
    cfg: &RunConfig,
    params: &PolicyParams,
    state: &PolicyState<'_>,
    duals: &InstanceDuals,
    seed: u64,
    index: usize,
) -> AppResult<(CellRecord, CellArtifact)> {
    let inst = state.instance;
    let fams = &inst.families;
    let dist = forward(params, state)?;
    let action = dist.argmax;
    let grads = grad_log_prob(params, state, action)?;
    let proxy = attribute(Backend::Proxy, inst, &grads, &proxy_lambda(fams), fams)?;

    let mut attributions = Vec::new();
    let mut rec = CellRecord {
        seed,
        instance: index,
        step: state.step,
        action,
        n_feasible: state.feasible_actions().count(),
        margin: dist.margin(),
        family_mass: join_named(&proxy.lambda_scores),
        lp_lambda: String::new(),
        lp_scores: String::new(),
        lp_top1: String::new(),
        lp_sum_top1: String::new(),
        lp_max_top1: String::new(),
        subgrad_lambda: String::new(),
        subgrad_scores: String::new(),
        subgrad_top1: String::new(),
        proxy_scores: String::new(),
        proxy_top1: String::new(),
        cf_status: String::new(),
        cf_verdict: String::new(),
        cf_key: String::new(),
        cf_l1: None,
        cf_shot: None,
        cf_flipped_action: None,
        cf_family: String::new(),
        cf_sweep: String::new(),
        unc_candidates: 0,
        unc_flipping: 0,
        unc_flipping_arith: 0,
        pac_samples: 0,
        pac_k: None,
        pac_rates: String::new(),
        pac_subset: String::new(),
        pac_k_per_test: None,
    };
    if let Some((lambda, record)) = &duals.lp {
        let r = attribute(Backend::Lp, inst, &grads, lambda, fams)?;
        rec.lp_lambda = join_named(lambda);
        rec.lp_scores = join_named(&r.lambda_scores);
        rec.lp_top1 = r.top1.clone();
        let weighted = |agg: Aggregation| -> String {
            let l = &record.lambda[agg.name()];
            let scores: Vec<(String, f64)> = proxy
                .lambda_scores
                .iter()
                .zip(l)
                .map(|((n, m), (_, w))| (n.clone(), if *w == 0.0 { 0.0 } else { w * m }))
                .collect();
            top1(&scores).unwrap_or_default().to_string()
        };
        rec.lp_sum_top1 = weighted(Aggregation::Sum);
        rec.lp_max_top1 = weighted(Aggregation::Max);
        attributions.push(r);
    }
    if let Some(lambda) = &duals.subgrad {
        let r = attribute(Backend::Subgrad, inst, &grads, lambda, fams)?;
        rec.subgrad_lambda = join_named(lambda);
        rec.subgrad_scores = join_named(&r.lambda_scores);
        rec.subgrad_top1 = r.top1.clone();
        attributions.push(r);
    }
    if cfg.backends.contains(&Backend::Proxy) {
        rec.proxy_scores = join_named(&proxy.lambda_scores);
        rec.proxy_top1 = proxy.top1.clone();
        attributions.push(proxy.clone());
    }

    let step = state.step as u64;
    let mut cf_stream = rng::stream(seed_key(cfg, seed), &[purpose::COUNTERFACTUAL, index as u64, step]);
    let search = search_cell(params, state, &cfg.cf, &WallClock, &mut cf_stream)?;
    let cf = &search.cf;
    rec.cf_status = cf.status.name().into();
    rec.cf_verdict = cf.verdict.map_or("", |v| v.name()).into();
    if cf.status != CfStatus::None {
        rec.cf_key = cf.key.clone().unwrap_or_default();
        rec.cf_l1 = Some(cf.l1);
        rec.cf_shot = cf.shot;
        rec.cf_flipped_action = cf.flipped_action;
    }
    if cf.status == CfStatus::Certified {
        rec.cf_family = adjudicate(cf, cfg.cf.norm, cfg.cf.dim_normalize)?;
        let sweep: Vec<String> = adjudication_sweep(cf)?.into_iter().map(|(_, _, f)| f).collect();
        rec.cf_sweep = sweep.join(";");
    }
    let mut unc_stream = rng::stream(seed_key(cfg, seed), &[purpose::UNCONSTRAINED, index as u64, step]);
    let unc = unconstrained_baseline(params, state, &cfg.cf, &mut unc_stream)?;
    rec.unc_candidates = unc.candidates;
    rec.unc_flipping = unc.flipping;
    rec.unc_flipping_arith = unc.flipping_arith;

    let ordering = proxy.node_ordering();
    let pac = pac_for(cfg, params, state, &ordering, &cfg.pac, seed, index)?;
    let per_test = PacConfig {
        bonferroni: false,
        ..cfg.pac.clone()
    };
    let pac_per_test = pac_for(cfg, params, state, &ordering, &per_test, seed, index)?;
    rec.pac_samples = pac.samples;
    rec.pac_k = pac.accepted_k;
    rec.pac_rates = join_list(&pac.rates);
    rec.pac_subset = join_list(&pac.subset);
    rec.pac_k_per_test = pac_per_test.accepted_k;

    let artifact = CellArtifact {
        seed,
        instance: index,
        prefix: state.prefix.clone(),
        action,
        attributions,
        search,
        pac,
    };
    Ok((rec, artifact))
}

/// Rolls out the greedy policy on one instance and explains each step.
pub fn explain_instance(
    cfg: &RunConfig,
    params: &PolicyParams,
    inst: &Instance,
    seed: u64,
    index: usize,
) -> AppResult<(Vec<(CellRecord, CellArtifact)>, InstanceDuals)> {
    let duals = instance_duals(cfg, seed, index, inst)?;
    let mut out = Vec::new();
    let mut state = initial_state(inst);
    while out.len() < cfg.steps && !state.is_terminal() {
        let cell = explain_cell(cfg, params, &state, &duals, seed, index)?;
        let action = cell.0.action;
        out.push(cell);
        state = state.transition(action)?;
    }
    Ok((out, duals))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub code_version: String,
    pub master_seed: u64,
    pub problem: String,
    pub families: Vec<String>,
    pub cells_sha256: String,
    pub training: BTreeMap<String, Option<TrainLog>>,
    pub config: RunConfig,
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub header: CellsHeader,
    pub cells: Vec<CellRecord>,
    pub artifacts: Vec<CellArtifact>,
    /// `(seed, index, instance)` in run order.
    pub instances: Vec<(u64, usize, Instance)>,
    pub policies: BTreeMap<u64, PolicyParams>,
    pub stats: StatsFile,
    pub cells_bytes: Vec<u8>,
}

impl RunOutput {
    pub fn instance(&self, seed: u64, index: usize) -> Option<&Instance> {
        self.instances
            .iter()
            .find(|(s, i, _)| *s == seed && *i == index)
            .map(|(_, _, inst)| inst)
    }
}

fn pool(workers: usize) -> AppResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| AppError::Config(format!("worker pool: {e}")))
}

/// Runs the whole pipeline and writes the run directory.
pub fn run(cfg: &RunConfig) -> AppResult<RunOutput> {
    cfg.validate()?;
    let dir = cfg.output.clone();
    std::fs::create_dir_all(&dir).map_err(AppError::io(&dir))?;
    let pool = pool(cfg.workers)?;

    let policies: Vec<(u64, PolicyParams, Option<TrainLog>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| seed_policy(cfg, s).map(|(p, l)| (s, p, l)))
            .collect::<AppResult<_>>()
    })?;
    let tasks: Vec<(usize, usize)> = (0..cfg.seeds.len())
        .flat_map(|si| (0..cfg.instances).map(move |b| (si, b)))
        .collect();
    let results: Vec<InstanceOutput> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(si, b)| {
                let (seed, params, _) = &policies[si];
                let inst = seed_instance(cfg, *seed, b)?;
                let (cells, duals) = explain_instance(cfg, params, &inst, *seed, b)?;
                Ok((inst, cells, duals))
            })
            .collect::<AppResult<_>>()
    })?;

    let families: Vec<String> = cfg.problem.families().into_iter().map(|f| f.name).collect();
    let header = CellsHeader {
        schema_version: SCHEMA_VERSION,
        problem: cfg.problem,
        master_seed: cfg.master_seed,
        resamples: cfg.bootstrap_resamples,
        families: families.clone(),
    };
    let mut cells = Vec::new();
    let mut artifacts = Vec::new();
    let mut instances = Vec::new();
    let mut dual_records = Vec::new();
    for (&(si, b), (inst, cell_list, duals)) in tasks.iter().zip(results) {
        for (rec, art) in cell_list {
            cells.push(rec);
            artifacts.push(art);
        }
        if let Some((_, record)) = duals.lp {
            dual_records.push(record);
        }
        instances.push((cfg.seeds[si], b, inst));
    }

    let cells_bytes = write_cells(&header, &cells)?;
    write_file(&dir.join("cells.csv"), &cells_bytes)?;
    if cfg.log_candidates {
        let rows: Vec<CandidateRow> = artifacts
            .iter()
            .flat_map(|a| {
                a.search.log.iter().map(move |c| CandidateRow {
                    seed: a.seed,
                    instance: a.instance,
                    step: a.prefix.len(),
                    shot: c.shot,
                    key: c.key.clone(),
                    l1: c.l1,
                    flipped: c.flipped,
                    arith: c.arith,
                    kept: c.kept,
                })
            })
            .collect();
        write_file(&dir.join("candidates.csv"), &write_candidates(&rows)?)?;
    }
    write_json(&dir.join("duals.json"), &dual_records)?;
    let winners: Vec<serde_json::Value> = artifacts
        .iter()
        .filter(|a| a.search.cf.status != CfStatus::None)
        .map(|a| {
            serde_json::json!({
                "seed": a.seed, "instance": a.instance, "prefix": a.prefix, "counterfactual": a.search.cf,
            })
        })
        .collect();
    write_json(&dir.join("counterfactuals.json"), &winners)?;
    let stats = stats_from_cells(&header, &cells)?;
    write_json(&dir.join("stats.json"), &stats)?;
    write_file(&dir.join("fig_agreement.csv"), figure_csv(&stats).as_bytes())?;
    let mut training = BTreeMap::new();
    for (seed, params, log) in &policies {
        let ck = Checkpoint::new(params.clone(), cfg.generator(*seed), *seed, log.clone());
        write_json(&dir.join("policies").join(format!("seed_{seed}.json")), &ck)?;
        training.insert(seed.to_string(), log.clone());
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        master_seed: cfg.master_seed,
        problem: cfg.problem.name().into(),
        families,
        cells_sha256: crate::formats::sha256_hex(&cells_bytes),
        training,
        config: cfg.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(RunOutput {
        dir,
        header,
        cells,
        artifacts,
        instances,
        policies: policies.into_iter().map(|(s, p, _)| (s, p)).collect(),
        stats,
        cells_bytes,
    })
}

/// Recomputes `stats.json` from a run directory's `cells.csv`.
pub fn adjudicate_dir(dir: &Path) -> AppResult<StatsFile> {
    let (header, cells) = crate::cells::read_cells(&dir.join("cells.csv"))?;
    let stats = stats_from_cells(&header, &cells)?;
    write_json(&dir.join("stats.json"), &stats)?;
    write_file(&dir.join("fig_agreement.csv"), figure_csv(&stats).as_bytes())?;
    Ok(stats)
}
