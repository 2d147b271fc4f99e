//! Single-stage commands over a work directory.
//!
//! Layout: `config.json` and `instances/seed_<s>/<b>.json` (generate),
//! `policies/seed_<s>.json` (train), `attribution.csv` and `duals.json`
//! (attribute), `counterfactuals.json` and `candidates.csv`
//! (counterfactual), `pac.csv` (pac-subset). Each stage checks its inputs and
//! names the missing file when one is absent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use famattr_core::attribution::{attribute, proxy_lambda, Backend};
use famattr_core::counterfactual::{adjudication_sweep, search_cell, CfStatus};
use famattr_core::env::{initial_state, replay};
use famattr_core::instances::Instance;
use famattr_core::lp::build_lp;
use famattr_core::pac::PacConfig;
use famattr_core::policy::{argmax, grad_log_prob, PolicyParams};
use famattr_core::rng::{self, purpose};
use serde::{Deserialize, Serialize};

use crate::cells::{write_candidates, CandidateRow};
use crate::clock::WallClock;
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::formats::{
    join_list, join_named, read_instance, read_json, require, split_list, write_file, write_instance, write_json,
    Checkpoint,
};
use crate::pipeline::{instance_duals, seed_instance, seed_key, seed_policy};

pub const CONFIG_FILE: &str = "config.json";
pub const ATTRIBUTION_FILE: &str = "attribution.csv";
pub const PAC_FILE: &str = "pac.csv";

pub fn instance_path(dir: &Path, seed: u64, index: usize) -> PathBuf {
    dir.join("instances").join(format!("seed_{seed}")).join(format!("{index:04}.json"))
}

pub fn policy_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("policies").join(format!("seed_{seed}.json"))
}

/// Config stored by `generate`, with overrides applied by the caller.
pub fn load_config(dir: &Path) -> AppResult<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    require(&path, "run `famattr generate` on this directory first")?;
    RunConfig::load(&path)
}

pub fn generate(cfg: &RunConfig, dir: &Path) -> AppResult<Vec<PathBuf>> {
    cfg.validate()?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for b in 0..cfg.instances {
            let path = instance_path(dir, seed, b);
            write_instance(&path, &seed_instance(cfg, seed, b)?)?;
            out.push(path);
        }
    }
    Ok(out)
}

pub fn train(cfg: &RunConfig, dir: &Path) -> AppResult<Vec<PathBuf>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let (params, log) = seed_policy(cfg, seed)?;
        let path = policy_path(dir, seed);
        write_json(&path, &Checkpoint::new(params, cfg.generator(seed), seed, log))?;
        out.push(path);
    }
    Ok(out)
}

/// Inputs shared by the explanation stages.
struct Work {
    /// `(seed, index, instance, params)`.
    items: Vec<(u64, usize, Instance, PolicyParams)>,
}

fn load_work(cfg: &RunConfig, dir: &Path) -> AppResult<Work> {
    let mut items = Vec::new();
    for &seed in &cfg.seeds {
        let ppath = policy_path(dir, seed);
        require(&ppath, "run `famattr train` on this directory first")?;
        let ck: Checkpoint = read_json(&ppath)?;
        ck.check(&ppath)?;
        for b in 0..cfg.instances {
            let ipath = instance_path(dir, seed, b);
            require(&ipath, "run `famattr generate` with the same seeds and instance count")?;
            items.push((seed, b, read_instance(&ipath)?, ck.params.clone()));
        }
    }
    Ok(Work { items })
}

/// Greedy prefixes of the first `steps` decisions.
pub fn greedy_prefixes(params: &PolicyParams, inst: &Instance, steps: usize) -> AppResult<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut state = initial_state(inst);
    while out.len() < steps && !state.is_terminal() {
        out.push(state.prefix.clone());
        let a = argmax(params, &state)?;
        state = state.transition(a)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub seed: u64,
    pub instance: usize,
    pub step: usize,
    pub action: usize,
    pub backend: String,
    pub lambda: String,
    pub scores: String,
    pub top1: String,
    /// Nodes by decreasing `|grad * x|`.
    pub node_order: String,
}

pub fn attribute_stage(cfg: &RunConfig, dir: &Path, dump_lp: Option<&Path>) -> AppResult<usize> {
    cfg.validate()?;
    let work = load_work(cfg, dir)?;
    let mut rows = Vec::new();
    let mut duals_out = Vec::new();
    for (seed, b, inst, params) in &work.items {
        if let Some(lp_dir) = dump_lp {
            write_file(&lp_dir.join(format!("seed_{seed}_{b:04}.lp")), build_lp(inst).to_text().as_bytes())?;
        }
        let duals = instance_duals(cfg, *seed, *b, inst)?;
        for prefix in greedy_prefixes(params, inst, cfg.steps)? {
            let state = replay(inst, &prefix)?;
            let action = argmax(params, &state)?;
            let grads = grad_log_prob(params, &state, action)?;
            for backend in &cfg.backends {
                let lambda = match backend {
                    Backend::Lp => duals.lp.as_ref().map(|(l, _)| l.clone()),
                    Backend::Subgrad => duals.subgrad.clone(),
                    Backend::Proxy => Some(proxy_lambda(&inst.families)),
                }
                .expect("selected backends have multipliers");
                let r = attribute(*backend, inst, &grads, &lambda, &inst.families)?;
                rows.push(AttributionRow {
                    seed: *seed,
                    instance: *b,
                    step: state.step,
                    action,
                    backend: backend.name().into(),
                    lambda: join_named(&lambda),
                    scores: join_named(&r.lambda_scores),
                    top1: r.top1.clone(),
                    node_order: join_list(&r.node_ordering()),
                });
            }
        }
        if let Some((_, record)) = duals.lp {
            duals_out.push(record);
        }
    }
    write_file(&dir.join(ATTRIBUTION_FILE), &to_csv(&rows)?)?;
    write_json(&dir.join("duals.json"), &duals_out)?;
    Ok(rows.len())
}

pub fn counterfactual_stage(cfg: &RunConfig, dir: &Path) -> AppResult<usize> {
    cfg.validate()?;
    let work = load_work(cfg, dir)?;
    let mut winners = Vec::new();
    let mut candidates = Vec::new();
    for (seed, b, inst, params) in &work.items {
        for prefix in greedy_prefixes(params, inst, cfg.steps)? {
            let state = replay(inst, &prefix)?;
            let mut stream = rng::stream(
                seed_key(cfg, *seed),
                &[purpose::COUNTERFACTUAL, *b as u64, state.step as u64],
            );
            let search = search_cell(params, &state, &cfg.cf, &WallClock, &mut stream)?;
            candidates.extend(search.log.iter().map(|c| CandidateRow {
                seed: *seed,
                instance: *b,
                step: state.step,
                shot: c.shot,
                key: c.key.clone(),
                l1: c.l1,
                flipped: c.flipped,
                arith: c.arith,
                kept: c.kept,
            }));
            let sweep = if search.cf.status == CfStatus::Certified {
                adjudication_sweep(&search.cf)?
                    .into_iter()
                    .map(|(n, d, f)| (format!("{}/{}", n.name(), if d { "dim" } else { "raw" }), f))
                    .collect()
            } else {
                BTreeMap::new()
            };
            winners.push(serde_json::json!({
                "seed": seed, "instance": b, "prefix": prefix,
                "counterfactual": search.cf, "adjudication": sweep,
            }));
        }
    }
    write_json(&dir.join("counterfactuals.json"), &winners)?;
    write_file(&dir.join("candidates.csv"), &write_candidates(&candidates)?)?;
    Ok(winners.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacRow {
    pub seed: u64,
    pub instance: usize,
    pub step: usize,
    pub bonferroni: bool,
    pub samples: usize,
    pub accepted_k: Option<usize>,
    pub subset: String,
    pub rates: String,
}

/// Greedy PAC subsets along the orderings stored in `attribution.csv`.
pub fn pac_stage(cfg: &RunConfig, dir: &Path) -> AppResult<usize> {
    cfg.validate()?;
    let apath = dir.join(ATTRIBUTION_FILE);
    require(&apath, "run `famattr attribute` on this directory first")?;
    let mut orders: BTreeMap<(u64, usize, usize), Vec<usize>> = BTreeMap::new();
    for row in from_csv::<AttributionRow>(&apath)? {
        let order = split_list(&row.node_order).map_err(|e| AppError::format(&apath, e))?;
        orders.entry((row.seed, row.instance, row.step)).or_insert(order);
    }
    let work = load_work(cfg, dir)?;
    let mut rows = Vec::new();
    for (seed, b, inst, params) in &work.items {
        for prefix in greedy_prefixes(params, inst, cfg.steps)? {
            let state = replay(inst, &prefix)?;
            let order = orders.get(&(*seed, *b, state.step)).ok_or_else(|| {
                AppError::format(&apath, format!("no ordering for seed {seed} instance {b} step {}", state.step))
            })?;
            for bonferroni in [true, false] {
                let pac = PacConfig {
                    bonferroni,
                    ..cfg.pac.clone()
                };
                let base = famattr_core::pac::baseline_values(&state, pac.baseline, &cfg.generator(*seed));
                let mut stream = rng::stream(seed_key(cfg, *seed), &[purpose::PAC, *b as u64, state.step as u64]);
                let r = famattr_core::pac::greedy_subset(params, &state, order, &pac, &base, &mut stream)?;
                rows.push(PacRow {
                    seed: *seed,
                    instance: *b,
                    step: state.step,
                    bonferroni,
                    samples: r.samples,
                    accepted_k: r.accepted_k,
                    subset: join_list(&r.subset),
                    rates: join_list(&r.rates),
                });
            }
        }
    }
    write_file(&dir.join(PAC_FILE), &to_csv(&rows)?)?;
    Ok(rows.len())
}

fn to_csv<T: Serialize>(rows: &[T]) -> AppResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| AppError::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| AppError::Config(format!("csv: {e}")))
}

pub fn from_csv<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AppError::format(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| AppError::format(path, e))).collect()
}
