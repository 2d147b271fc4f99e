//! A small pointer-style scoring policy.
//!
//! Each per-node feature tensor has its own linear embedding; node embeddings
//! are summed and squashed, a context vector mixes global features, the
//! state's dynamic scalars, the mean embedding and (for routing) the current
//! node, and each feasible action is scored with an additive pointer glimpse
//! `v . tanh(P h_target + Q ctx)` plus a few direct terms (distance, window
//! slack, processing time).
//!
//! The forward pass is generic over [`Scalar`], so one body serves plain
//! evaluation, input gradients and parameter gradients. Dynamic scalars are
//! constants: gradients flow through the static embeddings and the current
//! step's context, not through the discrete action prefix.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::env::{self, PolicyState};
use crate::instances::{self, GeneratorConfig, Instance, Layout, Problem};
use crate::rng::{self, purpose};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub problem: Problem,
    pub embed_dim: usize,
    pub temperature: f64,
    pub seed: u64,
    pub arrays: BTreeMap<String, ParamArray>,
}

/// Per-node feature keys (with row widths) and context width for a problem.
fn input_layout(problem: Problem, machines: usize) -> (Vec<(&'static str, usize)>, usize) {
    match problem {
        Problem::Cvrptw => (
            vec![
                (instances::COORDS, 2),
                (instances::DEMAND, 1),
                (instances::SERVICE, 1),
                (instances::WINDOWS, 2),
            ],
            3,
        ),
        Problem::Op => (vec![(instances::COORDS, 2), (instances::PRIZE, 1)], 2),
        Problem::Fjsp => (
            vec![(instances::ELIGIBLE_COUNT, 1), (instances::PROC_TIME, machines)],
            2,
        ),
    }
}

fn param_shapes(problem: Problem, dim: usize, machines: usize) -> Vec<(String, Vec<usize>)> {
    let (keys, ctx) = input_layout(problem, machines);
    let mut shapes: Vec<(String, Vec<usize>)> = keys
        .iter()
        .map(|(k, w)| (format!("w.{k}"), vec![dim, *w]))
        .collect();
    shapes.push(("b.node".into(), vec![dim]));
    shapes.push(("w.ctx".into(), vec![dim, ctx]));
    shapes.push(("b.ctx".into(), vec![dim]));
    shapes.push(("u.mean".into(), vec![dim, dim]));
    shapes.push(("p".into(), vec![dim, dim]));
    shapes.push(("q".into(), vec![dim, dim]));
    shapes.push(("v".into(), vec![dim]));
    match problem {
        Problem::Cvrptw => {
            shapes.push(("u.cur".into(), vec![dim, dim]));
            shapes.push(("w.dist".into(), vec![1]));
            shapes.push(("w.slack".into(), vec![1]));
        }
        Problem::Op => {
            shapes.push(("u.cur".into(), vec![dim, dim]));
            shapes.push(("w.dist".into(), vec![1]));
        }
        Problem::Fjsp => {
            shapes.push(("e.machine".into(), vec![machines, dim]));
            shapes.push(("w.proc".into(), vec![1]));
            shapes.push(("w.start".into(), vec![1]));
        }
    }
    shapes
}

impl PolicyParams {
    /// All-zero parameters (uniform over feasible actions).
    pub fn zeros(problem: Problem, embed_dim: usize, machines: usize) -> Self {
        let arrays = param_shapes(problem, embed_dim, machines)
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                (name, ParamArray { shape, values: vec![0.0; n] })
            })
            .collect();
        Self {
            problem,
            embed_dim,
            temperature: 1.0,
            seed: 0,
            arrays,
        }
    }

    /// Seeded Gaussian initialisation scaled by fan-in.
    pub fn init(problem: Problem, embed_dim: usize, machines: usize, seed: u64) -> Self {
        let mut p = Self::zeros(problem, embed_dim, machines);
        p.seed = seed;
        let mut rng = rng::stream(seed, &[purpose::INIT, problem as u64]);
        for arr in p.arrays.values_mut() {
            let fan_in = arr.shape.last().copied().unwrap_or(1).max(1) as f64;
            let std = if arr.shape.len() == 1 && arr.shape[0] == 1 {
                0.5
            } else {
                1.0 / libm::sqrt(fan_in)
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in arr.values.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        p
    }

    /// Parameters matching the problem and machine count of `instance`.
    pub fn for_instance(instance: &Instance, embed_dim: usize, seed: u64) -> Self {
        let (_, machines, _) = instance.shop_dims();
        Self::init(instance.problem, embed_dim, machines, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let machines = self.arrays.get("e.machine").map_or(0, |a| a.shape[0]);
        let expected = param_shapes(self.problem, self.embed_dim, machines);
        if expected.len() != self.arrays.len() {
            return Err(Error::Schema("unexpected parameter set".into()));
        }
        for (name, shape) in expected {
            let arr = self
                .arrays
                .get(&name)
                .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))?;
            if arr.shape != shape || arr.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Schema(format!("parameter `{name}` has the wrong shape")));
            }
            if arr.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("parameter `{name}` has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.arrays.values().flat_map(|a| a.values.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for a in self.arrays.values_mut() {
            let n = a.values.len();
            a.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn slots(&self) -> BTreeMap<&str, usize> {
        let mut off = 0;
        self.arrays
            .iter()
            .map(|(k, a)| {
                let r = (k.as_str(), off);
                off += a.values.len();
                r
            })
            .collect()
    }

    fn check_instance(&self, instance: &Instance) -> Result<()> {
        if instance.problem != self.problem {
            return Err(Error::Config(format!(
                "policy for {} applied to a {} instance",
                self.problem.name(),
                instance.problem.name()
            )));
        }
        if let Some(e) = self.arrays.get("e.machine") {
            let (_, machines, _) = instance.shop_dims();
            if e.shape[0] != machines {
                return Err(Error::Config("machine count differs from the policy's".into()));
            }
        }
        Ok(())
    }
}

/// Offsets of named parameter blocks inside the flat parameter vector.
struct Net<'a, S> {
    p: &'a [S],
    slots: BTreeMap<&'a str, usize>,
    dim: usize,
}

impl<'a, S: Scalar> Net<'a, S> {
    fn at(&self, name: &str) -> usize {
        self.slots[name]
    }

    /// `W v + init`, with `W` stored row-major at `name` and `cols = v.len()`.
    fn affine(&self, name: &str, v: &[S], init: Vec<S>) -> Vec<S> {
        let base = self.at(name);
        let cols = v.len();
        init.into_iter()
            .enumerate()
            .map(|(r, acc)| {
                let row = &self.p[base + r * cols..base + (r + 1) * cols];
                row.iter().zip(v).fold(acc, |a, (w, x)| a + *w * *x)
            })
            .collect()
    }

    fn vector(&self, name: &str) -> Vec<S> {
        let base = self.at(name);
        self.p[base..base + self.dim].to_vec()
    }

    fn scalar(&self, name: &str) -> S {
        self.p[self.at(name)]
    }
}

struct Encoded<S> {
    emb: Vec<Vec<S>>,
    mean: Vec<S>,
}

/// Feature offsets of `instance` keyed by tensor key.
fn feature_offsets(instance: &Instance) -> BTreeMap<&str, usize> {
    instance
        .key_offsets()
        .into_iter()
        .map(|(k, off, _)| (k, off))
        .collect()
}

fn encode<S: Scalar>(net: &Net<'_, S>, instance: &Instance, x: &[S], xoff: &BTreeMap<&str, usize>) -> Encoded<S> {
    let (_, machines, _) = instance.shop_dims();
    let (keys, _) = input_layout(instance.problem, machines);
    let n = instance.n_nodes;
    let emb: Vec<Vec<S>> = (0..n)
        .map(|i| {
            let mut acc = net.vector("b.node");
            for (key, w) in &keys {
                let off = xoff[key] + i * w;
                acc = net.affine(&format!("w.{key}"), &x[off..off + w], acc);
            }
            acc.into_iter().map(S::tanh).collect()
        })
        .collect();
    let inv = 1.0 / n as f64;
    let mean = (0..net.dim)
        .map(|r| {
            let s = emb[1..].iter().fold(emb[0][r], |a, e| a + e[r]);
            s * inv
        })
        .collect();
    Encoded { emb, mean }
}

fn policy_dist<S: Scalar>(x: &[S], xoff: &BTreeMap<&str, usize>, i: usize, j: usize) -> S {
    let c = xoff[instances::COORDS];
    let dx = x[c + 2 * i] - x[c + 2 * j];
    let dy = x[c + 2 * i + 1] - x[c + 2 * j + 1];
    (dx * dx + dy * dy + 1e-12).sqrt()
}

/// Logits for every action (`None` where masked), before temperature.
fn decode<S: Scalar>(
    net: &Net<'_, S>,
    enc: &Encoded<S>,
    x: &[S],
    xoff: &BTreeMap<&str, usize>,
    state: &PolicyState<'_>,
) -> Vec<Option<S>> {
    let inst = state.instance;
    let one = x[0].lift(1.0);
    // Context inputs: global tensors in key order, then dynamic scalars.
    let mut ctx_in: Vec<S> = Vec::new();
    for t in inst.tensors.values() {
        if t.layout == Layout::Global {
            ctx_in.extend((0..t.len()).map(|j| x[xoff[t.key.as_str()] + j]));
        }
    }
    ctx_in.extend(state.context_scalars().into_iter().map(|v| one.lift(v)));
    let mut ctx = net.affine("w.ctx", &ctx_in, net.vector("b.ctx"));
    ctx = net.affine("u.mean", &enc.mean, ctx);
    if let Some(cur) = state.current_node() {
        ctx = net.affine("u.cur", &enc.emb[cur], ctx);
    }
    let ctx: Vec<S> = ctx.into_iter().map(S::tanh).collect();
    let zero = one.lift(0.0);
    let qc = net.affine("q", &ctx, vec![zero; net.dim]);
    let v = net.vector("v");
    let glimpse = |target: usize, extra: Option<Vec<S>>| -> S {
        let init = extra.unwrap_or_else(|| qc.clone());
        let pre = net.affine("p", &enc.emb[target], init);
        pre.into_iter()
            .zip(&v)
            .fold(zero, |acc, (z, w)| acc + z.tanh() * *w)
    };
    let mut out = vec![None; state.mask.len()];
    match inst.problem {
        Problem::Cvrptw | Problem::Op => {
            let cur = state.current_node().expect("routing state");
            let time = state.context_scalars().get(1).copied().unwrap_or(0.0);
            for a in state.feasible_actions() {
                let d = policy_dist(x, xoff, cur, a);
                let mut score = glimpse(a, None) + net.scalar("w.dist") * d;
                if inst.problem == Problem::Cvrptw {
                    let w = xoff[instances::WINDOWS];
                    let (open, close) = (x[w + 2 * a], x[w + 2 * a + 1]);
                    let slack = close - (d + time).max(open);
                    score = score + net.scalar("w.slack") * slack;
                }
                out[a] = Some(score);
            }
        }
        Problem::Fjsp => {
            let (_, machines, _) = inst.shop_dims();
            let e = net.at("e.machine");
            let pt = xoff[instances::PROC_TIME];
            for a in state.feasible_actions() {
                let (op, m, start) = state.fjsp_target(a).expect("feasible action has a target");
                let init: Vec<S> = (0..net.dim).map(|r| qc[r] + net.p[e + m * net.dim + r]).collect();
                let score = glimpse(op, Some(init))
                    + net.scalar("w.proc") * x[pt + op * machines + m]
                    + net.scalar("w.start") * start;
                out[a] = Some(score);
            }
        }
    }
    out
}

fn logits_generic<S: Scalar>(params: &PolicyParams, p: &[S], x: &[S], state: &PolicyState<'_>) -> Vec<Option<S>> {
    let net = Net {
        p,
        slots: params.slots(),
        dim: params.embed_dim,
    };
    let xoff = feature_offsets(state.instance);
    let enc = encode(&net, state.instance, x, &xoff);
    let inv_t = 1.0 / params.temperature;
    decode(&net, &enc, x, &xoff, state)
        .into_iter()
        .map(|l| l.map(|l| l * inv_t))
        .collect()
}

/// `log pi(action)` from optional logits, shifting by the value-level max.
fn log_softmax_at<S: Scalar>(logits: &[Option<S>], action: usize) -> Result<S> {
    let la = logits
        .get(action)
        .copied()
        .flatten()
        .ok_or(Error::InfeasibleAction(action))?;
    let max = logits
        .iter()
        .flatten()
        .map(Scalar::value)
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = la.lift(max);
    let mut terms = logits.iter().flatten().map(|&l| (l - shift).exp());
    let first = terms.next().expect("at least one logit");
    let z = terms.fold(first, |a, t| a + t);
    let lp = la - shift - z.ln();
    if !lp.value().is_finite() {
        return Err(Error::Domain(format!("action {action} has zero probability")));
    }
    Ok(lp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDistribution {
    /// Logits per action; `-inf` on masked actions.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub argmax: usize,
}

impl StepDistribution {
    fn from_logits(logits: Vec<Option<f64>>) -> Result<Self> {
        let mut argmax = None;
        let mut best = f64::NEG_INFINITY;
        for (a, l) in logits.iter().enumerate() {
            if let Some(l) = *l {
                if argmax.is_none() || l > best {
                    best = l;
                    argmax = Some(a);
                }
            }
        }
        let argmax = argmax.ok_or(Error::Terminal)?;
        let z: f64 = logits.iter().flatten().map(|l| libm::exp(l - best)).sum();
        let probs = logits
            .iter()
            .map(|l| l.map_or(0.0, |l| libm::exp(l - best) / z))
            .collect();
        Ok(Self {
            logits: logits.into_iter().map(|l| l.unwrap_or(f64::NEG_INFINITY)).collect(),
            probs,
            argmax,
        })
    }

    /// Top-1 minus top-2 logit; `None` with a single feasible action.
    pub fn margin(&self) -> Option<f64> {
        let mut finite: Vec<f64> = self.logits.iter().copied().filter(|l| l.is_finite()).collect();
        if finite.len() < 2 {
            return None;
        }
        finite.sort_by(|a, b| b.total_cmp(a));
        Some(finite[0] - finite[1])
    }
}

pub fn forward(params: &PolicyParams, state: &PolicyState<'_>) -> Result<StepDistribution> {
    forward_with_features(params, state, &state.instance.flat_values())
}

/// Forward pass on replacement feature values, keeping the state's dynamics
/// and mask.
pub fn forward_with_features(params: &PolicyParams, state: &PolicyState<'_>, flat: &[f64]) -> Result<StepDistribution> {
    params.check_instance(state.instance)?;
    if state.is_terminal() {
        return Err(Error::Terminal);
    }
    if flat.len() != state.instance.dimension() {
        return Err(Error::Schema("feature vector length mismatch".into()));
    }
    StepDistribution::from_logits(logits_generic(params, &params.flat(), flat, state))
}

/// Greedy action, lowest index on ties.
pub fn argmax(params: &PolicyParams, state: &PolicyState<'_>) -> Result<usize> {
    forward(params, state).map(|d| d.argmax)
}

/// `d log pi(action | state) / d x` for every feature entry, keyed by tensor.
pub type FeatureGrads = BTreeMap<String, Vec<f64>>;

pub fn grad_log_prob(params: &PolicyParams, state: &PolicyState<'_>, action: usize) -> Result<FeatureGrads> {
    grad_log_prob_over(params, state, action, |_| true)
}

/// Like [`grad_log_prob`] but only keys accepted by `active` are
/// differentiated; the rest are held as constants and report zeros.
pub fn grad_log_prob_over(
    params: &PolicyParams,
    state: &PolicyState<'_>,
    action: usize,
    active: impl Fn(&str) -> bool,
) -> Result<FeatureGrads> {
    params.check_instance(state.instance)?;
    if state.is_terminal() {
        return Err(Error::Terminal);
    }
    if !state.mask.get(action).copied().unwrap_or(false) {
        return Err(Error::InfeasibleAction(action));
    }
    let tape = Tape::new();
    let p: Vec<Var<'_>> = params.flat().into_iter().map(|v| tape.var(v)).collect();
    let x: Vec<Var<'_>> = state.instance.flat_values().into_iter().map(|v| tape.var(v)).collect();
    let logits = logits_generic(params, &p, &x, state);
    let lp = log_softmax_at(&logits, action)?;
    let adj = tape.gradient(lp);
    let mut out = BTreeMap::new();
    for (key, off, len) in state.instance.key_offsets() {
        let g = if active(key) {
            (0..len).map(|j| adj[x[off + j].index()]).collect()
        } else {
            vec![0.0; len]
        };
        out.insert(key.to_string(), g);
    }
    Ok(out)
}

/// Validation summary of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub episodes: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub validation_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub validation_instances: usize,
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            validation_instances: 32,
            clip_norm: 5.0,
        }
    }
}

/// Greedy rollout to the end of the episode; returns the episode cost.
pub fn greedy_rollout_cost(params: &PolicyParams, instance: &Instance) -> Result<f64> {
    let mut state = env::initial_state(instance);
    while !state.is_terminal() {
        let a = argmax(params, &state)?;
        state = state.transition(a)?;
    }
    Ok(env::episode_cost(&state))
}

fn validation_cost(params: &PolicyParams, generator: &GeneratorConfig, seed: u64, count: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..count {
        let inst = instances::generate(&generator.with_seed(rng::mix(seed, &[purpose::TRAIN, u64::MAX, i as u64])))?;
        total += greedy_rollout_cost(params, &inst)?;
    }
    Ok(total / count.max(1) as f64)
}

/// REINFORCE with a greedy-rollout baseline, Adam updates.
///
/// `episodes = 0` returns `params` unchanged.
pub fn train_reinforce(
    params: &PolicyParams,
    generator: &GeneratorConfig,
    episodes: usize,
    seed: u64,
    options: &TrainOptions,
) -> Result<(PolicyParams, TrainLog)> {
    params.validate()?;
    let vcount = options.validation_instances;
    let initial_cost = validation_cost(params, generator, seed, vcount)?;
    let mut current = params.clone();
    let mut theta = params.flat();
    let (mut m1, mut m2) = (vec![0.0; theta.len()], vec![0.0; theta.len()]);
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut rng = rng::stream(seed, &[purpose::TRAIN]);
    for ep in 0..episodes {
        let inst = instances::generate(&generator.with_seed(rng::mix(seed, &[purpose::TRAIN, ep as u64])))?;
        let baseline = greedy_rollout_cost(&current, &inst)?;

        let tape = Tape::new();
        let p: Vec<Var<'_>> = theta.iter().map(|&v| tape.var(v)).collect();
        let x: Vec<Var<'_>> = inst.flat_values().into_iter().map(|v| tape.var(v)).collect();
        let net = Net {
            p: &p,
            slots: current.slots(),
            dim: current.embed_dim,
        };
        let xoff = feature_offsets(&inst);
        let enc = encode(&net, &inst, &x, &xoff);
        let mut state = env::initial_state(&inst);
        let mut total_lp: Option<Var<'_>> = None;
        let inv_t = 1.0 / current.temperature;
        while !state.is_terminal() {
            let logits: Vec<Option<Var<'_>>> = decode(&net, &enc, &x, &xoff, &state)
                .into_iter()
                .map(|l| l.map(|l| l * inv_t))
                .collect();
            let probs = StepDistribution::from_logits(logits.iter().map(|l| l.map(|v| v.value())).collect())?.probs;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut action = None;
            for (a, pr) in probs.iter().enumerate() {
                if *pr > 0.0 {
                    acc += pr;
                    action = Some(a);
                    if u < acc {
                        break;
                    }
                }
            }
            let action = action.ok_or(Error::Terminal)?;
            let lp = log_softmax_at(&logits, action)?;
            total_lp = Some(match total_lp {
                Some(t) => t + lp,
                None => lp,
            });
            state = state.transition(action)?;
        }
        let advantage = env::episode_cost(&state) - baseline;
        let Some(total_lp) = total_lp else { continue };
        if advantage == 0.0 {
            continue;
        }
        let adj = tape.gradient(total_lp);
        let mut grad: Vec<f64> = p.iter().map(|v| advantage * adj[v.index()]).collect();
        let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        if norm > options.clip_norm {
            let s = options.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let t = (ep + 1) as i32;
        let (c1, c2) = (1.0 - libm::pow(beta1, t as f64), 1.0 - libm::pow(beta2, t as f64));
        for i in 0..theta.len() {
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
            theta[i] -= options.learning_rate * (m1[i] / c1) / (libm::sqrt(m2[i] / c2) + eps);
        }
        current.set_flat(&theta);
    }
    let final_cost = validation_cost(&current, generator, seed, vcount)?;
    Ok((
        current,
        TrainLog {
            episodes,
            initial_cost,
            final_cost,
            validation_instances: vcount,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::initial_state;
    use crate::instances::generate;

    #[test]
    fn zero_params_give_uniform_distribution() {
        let inst = generate(&GeneratorConfig::cvrptw(6, 1)).unwrap();
        let s = initial_state(&inst);
        let d = forward(&PolicyParams::zeros(Problem::Cvrptw, 4, 0), &s).unwrap();
        let k = s.feasible_actions().count() as f64;
        for a in 0..s.mask.len() {
            let expect = if s.mask[a] { 1.0 / k } else { 0.0 };
            assert!((d.probs[a] - expect).abs() < 1e-15);
        }
        assert_eq!(d.argmax, s.feasible_actions().next().unwrap());
    }

    #[test]
    fn single_feasible_action_has_probability_one() {
        let inst = generate(&GeneratorConfig::cvrptw(3, 1)).unwrap();
        let params = PolicyParams::for_instance(&inst, 8, 3);
        let mut s = initial_state(&inst);
        while s.feasible_actions().count() > 1 {
            let a = s.feasible_actions().find(|&a| a != 0).unwrap();
            s = s.transition(a).unwrap();
        }
        assert_eq!(s.feasible_actions().collect::<Vec<_>>(), vec![0]);
        let d = forward(&params, &s).unwrap();
        assert_eq!(d.probs[0], 1.0);
        assert_eq!(d.margin(), None);
    }

    #[test]
    fn terminal_state_is_an_error() {
        let inst = generate(&GeneratorConfig::op(4, 0)).unwrap();
        let s = initial_state(&inst).transition(0).unwrap();
        let params = PolicyParams::for_instance(&inst, 8, 0);
        assert_eq!(forward(&params, &s), Err(Error::Terminal));
    }

    #[test]
    fn probabilities_are_normalised() {
        for seed in 0..10 {
            let inst = generate(&GeneratorConfig::fjsp(3, 2, seed)).unwrap();
            let params = PolicyParams::for_instance(&inst, 8, seed);
            let d = forward(&params, &initial_state(&inst)).unwrap();
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unread_entries_have_zero_gradient() {
        // Ineligible processing-time entries still enter the embedding, but a
        // masked CVRPTW depot action never reads the depot's window slack.
        let mut late_seen = false;
        for seed in 0..20 {
            let inst = generate(&GeneratorConfig::cvrptw(5, seed)).unwrap();
            let mut params = PolicyParams::for_instance(&inst, 6, 1);
            // Kill every path except the slack term.
            for (name, arr) in params.arrays.iter_mut() {
                if name != "w.slack" {
                    arr.values.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let s = initial_state(&inst);
            let a = s.feasible_actions().find(|&a| a != 0).unwrap();
            let g = grad_log_prob(&params, &s, a).unwrap();
            // Travel time enters the slack only where it exceeds the opening time.
            let late = s.feasible_actions().any(|j| j != 0 && inst.dist(0, j) > inst.window(j).0);
            late_seen |= late;
            assert_eq!(g["coords"].iter().any(|&v| v != 0.0), late);
            assert!(g["demand"].iter().all(|&v| v == 0.0));
            assert!(g["capacity"].iter().all(|&v| v == 0.0));
            assert_eq!(g["windows"][0], 0.0);
            assert_eq!(g["windows"][1], 0.0);
        }
        assert!(late_seen);
    }

    #[test]
    fn score_function_identity() {
        for seed in 0..5 {
            for cfg in [
                GeneratorConfig::cvrptw(6, seed),
                GeneratorConfig::op(6, seed),
                GeneratorConfig::fjsp(2, 3, seed),
            ] {
                let inst = generate(&cfg).unwrap();
                let params = PolicyParams::for_instance(&inst, 8, seed);
                let s = initial_state(&inst);
                let d = forward(&params, &s).unwrap();
                let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for a in s.feasible_actions() {
                    for (k, g) in grad_log_prob(&params, &s, a).unwrap() {
                        let e = acc.entry(k).or_insert_with(|| vec![0.0; g.len()]);
                        for (e, g) in e.iter_mut().zip(g) {
                            *e += d.probs[a] * g;
                        }
                    }
                }
                for v in acc.values().flatten() {
                    assert!(v.abs() < 1e-8, "{v}");
                }
            }
        }
    }

    #[test]
    fn argmax_invariant_under_temperature() {
        let inst = generate(&GeneratorConfig::op(8, 5)).unwrap();
        let mut params = PolicyParams::for_instance(&inst, 8, 9);
        let s = initial_state(&inst);
        let a = argmax(&params, &s).unwrap();
        for t in [0.1, 0.5, 3.0, 40.0] {
            params.temperature = t;
            assert_eq!(argmax(&params, &s).unwrap(), a);
        }
    }

    #[test]
    fn masked_node_feature_leaves_argmax_unchanged() {
        // FJSP embeddings only reach the score through the target op's own
        // embedding and the mean; zero the mean path and perturb a finished op.
        let inst = generate(&GeneratorConfig::fjsp(2, 2, 4)).unwrap();
        let mut params = PolicyParams::for_instance(&inst, 6, 2);
        params.arrays.get_mut("u.mean").unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        let s0 = initial_state(&inst);
        let a0 = s0.feasible_actions().next().unwrap();
        let s = s0.transition(a0).unwrap();
        let base = forward(&params, &s).unwrap();
        // Op 0 of job 0 is already scheduled: no action targets it.
        let mut flat = inst.flat_values();
        let (_, off, _) = inst.key_offsets().into_iter().find(|(k, _, _)| *k == "eligible_count").unwrap();
        for h in [-0.5, 0.3, 2.0] {
            flat[off] = inst.eligible_count(0) + h;
            let d = forward_with_features(&params, &s, &flat).unwrap();
            assert_eq!(d.argmax, base.argmax);
            for (a, b) in d.logits.iter().zip(&base.logits) {
                assert!(a == b || (a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_episodes_returns_seeded_init() {
        let gen = GeneratorConfig::cvrptw(5, 0);
        let init = PolicyParams::init(Problem::Cvrptw, 8, 0, 11);
        let (trained, log) = train_reinforce(&init, &gen, 0, 11, &TrainOptions::default()).unwrap();
        assert_eq!(trained, init);
        assert_eq!(log.initial_cost, log.final_cost);
        assert_eq!(PolicyParams::init(Problem::Cvrptw, 8, 0, 11), init);
    }
}
