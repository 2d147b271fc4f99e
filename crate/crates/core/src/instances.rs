//! CO instances, feature tensors, constraint families and seeded generators.
//!
//! Node 0 is the depot for CVRPTW and OP. FJSP nodes are operations, ordered
//! job-major (`job * ops_per_job + k`).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, purpose};
use crate::{Error, Result};

pub const COORDS: &str = "coords";
pub const DEMAND: &str = "demand";
pub const WINDOWS: &str = "windows";
pub const SERVICE: &str = "service";
pub const CAPACITY: &str = "capacity";
pub const PRIZE: &str = "prize";
pub const BUDGET: &str = "budget";
pub const PROC_TIME: &str = "proc_time";
pub const ELIGIBLE_COUNT: &str = "eligible_count";

/// Layout of a canonical tensor key: scalar fields are global, the rest
/// carry one row per node.
pub fn canonical_layout(key: &str) -> Layout {
    match key {
        CAPACITY | BUDGET => Layout::Global,
        _ => Layout::PerNode,
    }
}

pub const MAX_ROUTING_NODES: usize = 20;
pub const MAX_JOBS: usize = 6;
pub const MAX_MACHINES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Problem {
    #[serde(rename = "CVRPTW")]
    Cvrptw,
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "FJSP")]
    Fjsp,
}

impl Problem {
    pub const ALL: [Problem; 3] = [Problem::Cvrptw, Problem::Op, Problem::Fjsp];

    pub fn name(self) -> &'static str {
        match self {
            Problem::Cvrptw => "CVRPTW",
            Problem::Op => "OP",
            Problem::Fjsp => "FJSP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cvrptw" => Ok(Problem::Cvrptw),
            "op" => Ok(Problem::Op),
            "fjsp" => Ok(Problem::Fjsp),
            other => Err(Error::Config(format!("unknown problem `{other}`"))),
        }
    }

    /// Canonical family definitions in their fixed order.
    pub fn families(self) -> Vec<ConstraintFamily> {
        let fam = |name: &str, keys: &[&str]| ConstraintFamily {
            name: name.to_string(),
            feature_keys: keys.iter().map(|k| k.to_string()).collect(),
            lp_row_tag: name.to_string(),
        };
        match self {
            Problem::Cvrptw => vec![
                fam("capacity", &[DEMAND, CAPACITY]),
                fam("time-window", &[WINDOWS, SERVICE]),
                fam("spatial", &[COORDS]),
            ],
            Problem::Op => vec![
                fam("prize", &[PRIZE]),
                fam("budget", &[BUDGET]),
                fam("spatial", &[COORDS]),
            ],
            Problem::Fjsp => vec![
                fam("precedence", &[PROC_TIME]),
                fam("eligibility", &[ELIGIBLE_COUNT]),
            ],
        }
    }
}

/// Whether the leading axis of a tensor indexes nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    PerNode,
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub key: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl FeatureTensor {
    pub fn new(key: &str, shape: Vec<usize>, values: Vec<f64>, layout: Layout) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Schema(format!(
                "tensor `{key}`: shape {shape:?} holds {n} entries, got {}",
                values.len()
            )));
        }
        Ok(Self {
            key: key.to_string(),
            shape,
            values,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scalars per node row (1 for a global tensor).
    pub fn row_width(&self) -> usize {
        match self.layout {
            Layout::PerNode => self.shape[1..].iter().product(),
            Layout::Global => 1,
        }
    }

    /// Node owning flat entry `j`, or `None` for the global slot.
    pub fn node_of(&self, j: usize) -> Option<usize> {
        match self.layout {
            Layout::PerNode => Some(j / self.row_width()),
            Layout::Global => None,
        }
    }

    pub fn row(&self, node: usize) -> &[f64] {
        let w = self.row_width();
        &self.values[node * w..(node + 1) * w]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintFamily {
    pub name: String,
    pub feature_keys: Vec<String>,
    pub lp_row_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemParams {
    Routing {
        depot: usize,
    },
    Shop {
        jobs: usize,
        machines: usize,
        ops_per_job: usize,
        eligible: Vec<bool>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub problem: Problem,
    pub n_nodes: usize,
    pub tensors: BTreeMap<String, FeatureTensor>,
    pub families: Vec<ConstraintFamily>,
    pub params: ProblemParams,
}

impl Instance {
    /// Assembles and validates an instance.
    pub fn new(
        problem: Problem,
        n_nodes: usize,
        tensors: Vec<FeatureTensor>,
        families: Vec<ConstraintFamily>,
        params: ProblemParams,
    ) -> Result<Self> {
        let inst = Self {
            problem,
            n_nodes,
            tensors: tensors.into_iter().map(|t| (t.key.clone(), t)).collect(),
            families,
            params,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::Schema("instance has no nodes".into()));
        }
        for (key, t) in &self.tensors {
            if key != &t.key {
                return Err(Error::Schema(format!("tensor stored under `{key}` has key `{}`", t.key)));
            }
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::Schema(format!("tensor `{key}` shape mismatch")));
            }
            if t.layout == Layout::PerNode && t.shape.first() != Some(&self.n_nodes) {
                return Err(Error::Schema(format!("tensor `{key}` leading axis is not N")));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("tensor `{key}` has non-finite entries")));
            }
        }
        if self.dimension() == 0 {
            return Err(Error::Schema("total feature dimension is zero".into()));
        }
        let canonical = self.problem.families();
        if self.families != canonical {
            return Err(Error::Schema(format!(
                "families do not match the canonical {} families",
                self.problem.name()
            )));
        }
        for fam in &self.families {
            if fam.feature_keys.is_empty() {
                return Err(Error::Schema(format!("family `{}` has no feature keys", fam.name)));
            }
            for k in &fam.feature_keys {
                if !self.tensors.contains_key(k) {
                    return Err(Error::Schema(format!(
                        "family `{}` references missing tensor `{k}`",
                        fam.name
                    )));
                }
            }
        }
        match (&self.params, self.problem) {
            (ProblemParams::Routing { depot }, Problem::Cvrptw | Problem::Op) if *depot < self.n_nodes => {}
            (
                ProblemParams::Shop {
                    jobs,
                    machines,
                    ops_per_job,
                    eligible,
                },
                Problem::Fjsp,
            ) if jobs * ops_per_job == self.n_nodes && eligible.len() == self.n_nodes * machines => {}
            _ => return Err(Error::Schema("params do not match problem".into())),
        }
        Ok(())
    }

    /// Total scalar count `d` over all tensors.
    pub fn dimension(&self) -> usize {
        self.tensors.values().map(FeatureTensor::len).sum()
    }

    pub fn tensor(&self, key: &str) -> Result<&FeatureTensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{key}`")))
    }

    pub fn family(&self, name: &str) -> Result<&ConstraintFamily> {
        self.families
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFamily(name.to_string()))
    }

    /// Number of scalar entries parameterising `family`.
    pub fn family_dimension(&self, family: &ConstraintFamily) -> Result<usize> {
        if !self.families.iter().any(|f| f.name == family.name) {
            return Err(Error::UnknownFamily(family.name.clone()));
        }
        family
            .feature_keys
            .iter()
            .map(|k| self.tensor(k).map(FeatureTensor::len))
            .sum()
    }

    /// Family owning a feature key (first in family order).
    pub fn family_of_key(&self, key: &str) -> Option<&ConstraintFamily> {
        self.families
            .iter()
            .find(|f| f.feature_keys.iter().any(|k| k == key))
    }

    /// Copy with `delta` added entrywise to tensor `key`.
    pub fn perturbed(&self, key: &str, delta: &[f64]) -> Result<Instance> {
        let mut out = self.clone();
        let t = out
            .tensors
            .get_mut(key)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{key}`")))?;
        if t.values.len() != delta.len() {
            return Err(Error::Schema(format!("perturbation length mismatch for `{key}`")));
        }
        for (v, d) in t.values.iter_mut().zip(delta) {
            *v += d;
        }
        Ok(out)
    }

    /// All feature values concatenated in key order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.values.iter().copied()).collect()
    }

    /// `(key, offset, len)` of every tensor inside [`Instance::flat_values`].
    pub fn key_offsets(&self) -> Vec<(&str, usize, usize)> {
        let mut off = 0;
        self.tensors
            .values()
            .map(|t| {
                let r = (t.key.as_str(), off, t.len());
                off += t.len();
                r
            })
            .collect()
    }

    /// Node of each flat entry (`None` for global entries).
    pub fn flat_nodes(&self) -> Vec<Option<usize>> {
        self.tensors
            .values()
            .flat_map(|t| (0..t.len()).map(move |j| t.node_of(j)))
            .collect()
    }

    /// Copy whose features are replaced by `flat` (same order as [`Instance::flat_values`]).
    pub fn with_flat_values(&self, flat: &[f64]) -> Instance {
        let mut out = self.clone();
        let mut off = 0;
        for t in out.tensors.values_mut() {
            let n = t.values.len();
            t.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        out
    }

    fn scalar(&self, key: &str, j: usize) -> f64 {
        self.tensors[key].values[j]
    }

    pub fn depot(&self) -> usize {
        match self.params {
            ProblemParams::Routing { depot } => depot,
            ProblemParams::Shop { .. } => 0,
        }
    }

    pub fn coord(&self, i: usize) -> (f64, f64) {
        (self.scalar(COORDS, 2 * i), self.scalar(COORDS, 2 * i + 1))
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coord(i), self.coord(j));
        libm::sqrt((a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1))
    }

    pub fn demand(&self, i: usize) -> f64 {
        self.scalar(DEMAND, i)
    }

    pub fn window(&self, i: usize) -> (f64, f64) {
        (self.scalar(WINDOWS, 2 * i), self.scalar(WINDOWS, 2 * i + 1))
    }

    pub fn service(&self, i: usize) -> f64 {
        self.scalar(SERVICE, i)
    }

    pub fn capacity(&self) -> f64 {
        self.scalar(CAPACITY, 0)
    }

    pub fn prize(&self, i: usize) -> f64 {
        self.scalar(PRIZE, i)
    }

    pub fn budget(&self) -> f64 {
        self.scalar(BUDGET, 0)
    }

    /// `(jobs, machines, ops_per_job)`; zeros for routing problems.
    pub fn shop_dims(&self) -> (usize, usize, usize) {
        match &self.params {
            ProblemParams::Shop {
                jobs,
                machines,
                ops_per_job,
                ..
            } => (*jobs, *machines, *ops_per_job),
            ProblemParams::Routing { .. } => (0, 0, 0),
        }
    }

    pub fn eligible(&self, op: usize, machine: usize) -> bool {
        match &self.params {
            ProblemParams::Shop {
                machines, eligible, ..
            } => eligible[op * machines + machine],
            ProblemParams::Routing { .. } => false,
        }
    }

    pub fn proc_time(&self, op: usize, machine: usize) -> f64 {
        let (_, m, _) = self.shop_dims();
        self.scalar(PROC_TIME, op * m + machine)
    }

    pub fn eligible_count(&self, op: usize) -> f64 {
        self.scalar(ELIGIBLE_COUNT, op)
    }
}

/// Sampling laws of the generators. All laws are uniform on the given ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranges {
    pub capacity: f64,
    pub demand: (f64, f64),
    pub service: (f64, f64),
    pub window_width: (f64, f64),
    pub horizon: f64,
    pub prize: (f64, f64),
    pub budget: (f64, f64),
    pub proc_time: (f64, f64),
    pub eligibility_prob: f64,
}

impl Default for Ranges {
    fn default() -> Self {
        Self {
            capacity: 1.0,
            demand: (0.05, 0.3),
            service: (0.02, 0.1),
            window_width: (0.3, 1.2),
            horizon: 3.0,
            prize: (0.1, 1.0),
            budget: (1.5, 2.5),
            proc_time: (1.0, 10.0),
            eligibility_prob: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub problem: Problem,
    /// Node count including the depot (routing problems).
    pub nodes: usize,
    pub jobs: usize,
    pub machines: usize,
    pub ops_per_job: usize,
    pub seed: u64,
    pub ranges: Ranges,
}

impl GeneratorConfig {
    pub fn cvrptw(nodes: usize, seed: u64) -> Self {
        Self::routing(Problem::Cvrptw, nodes, seed)
    }

    pub fn op(nodes: usize, seed: u64) -> Self {
        Self::routing(Problem::Op, nodes, seed)
    }

    fn routing(problem: Problem, nodes: usize, seed: u64) -> Self {
        Self {
            problem,
            nodes,
            jobs: 0,
            machines: 0,
            ops_per_job: 0,
            seed,
            ranges: Ranges::default(),
        }
    }

    /// FJSP with `ops_per_job = machines`.
    pub fn fjsp(jobs: usize, machines: usize, seed: u64) -> Self {
        Self {
            problem: Problem::Fjsp,
            nodes: jobs * machines,
            jobs,
            machines,
            ops_per_job: machines,
            seed,
            ranges: Ranges::default(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.ranges;
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match self.problem {
            Problem::Cvrptw | Problem::Op => {
                if self.nodes < 2 || self.nodes > MAX_ROUTING_NODES {
                    return bad("routing node count must be in [2, 20]");
                }
            }
            Problem::Fjsp => {
                if self.jobs == 0 || self.jobs > MAX_JOBS || self.machines == 0 || self.machines > MAX_MACHINES {
                    return bad("FJSP size must satisfy 1 <= J <= 6, 1 <= M <= 3");
                }
                if self.ops_per_job == 0 || self.ops_per_job > MAX_MACHINES {
                    return bad("ops_per_job must be in [1, 3]");
                }
            }
        }
        match self.problem {
            Problem::Cvrptw => {
                if !(r.capacity > 0.0) {
                    return bad("capacity must be positive");
                }
                if !range_ok(r.demand) || r.demand.0 <= 0.0 || r.demand.1 > r.capacity {
                    return bad("demand range must lie in (0, capacity]");
                }
                if !range_ok(r.service) || r.service.0 < 0.0 {
                    return bad("service range must be non-negative");
                }
                if !range_ok(r.window_width) || r.window_width.0 <= 0.0 {
                    return bad("window widths must be positive");
                }
                // Worst case: farthest customer, widest service, out and back.
                if r.horizon < 2.0 * core::f64::consts::SQRT_2 + r.service.1 || r.window_width.1 > r.horizon {
                    return bad("horizon too short for the unit square");
                }
            }
            Problem::Op => {
                if !range_ok(r.prize) || r.prize.0 <= 0.0 {
                    return bad("prizes must be positive");
                }
                if !range_ok(r.budget) || r.budget.0 <= 0.0 {
                    return bad("budget must be positive");
                }
            }
            Problem::Fjsp => {
                if !range_ok(r.proc_time) || r.proc_time.0 <= 0.0 {
                    return bad("processing times must be positive");
                }
                if !(r.eligibility_prob > 0.0 && r.eligibility_prob <= 1.0) {
                    return bad("eligibility probability must be in (0, 1]");
                }
            }
        }
        Ok(())
    }

    /// Per-column mean of each feature under the sampling law, used as a
    /// masking baseline. Window means are those of the unconditioned law.
    pub fn feature_means(&self) -> BTreeMap<String, Vec<f64>> {
        let r = &self.ranges;
        let mid = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
        let mut out = BTreeMap::new();
        match self.problem {
            Problem::Cvrptw => {
                let w = mid(r.window_width);
                let open = 0.5 * (r.horizon - w);
                out.insert(COORDS.into(), vec![0.5, 0.5]);
                out.insert(DEMAND.into(), vec![mid(r.demand)]);
                out.insert(WINDOWS.into(), vec![open, open + w]);
                out.insert(SERVICE.into(), vec![mid(r.service)]);
                out.insert(CAPACITY.into(), vec![r.capacity]);
            }
            Problem::Op => {
                out.insert(COORDS.into(), vec![0.5, 0.5]);
                out.insert(PRIZE.into(), vec![mid(r.prize)]);
                out.insert(BUDGET.into(), vec![mid(r.budget)]);
            }
            Problem::Fjsp => {
                let p = r.eligibility_prob;
                out.insert(PROC_TIME.into(), vec![p * mid(r.proc_time); self.machines]);
                out.insert(ELIGIBLE_COUNT.into(), vec![p * self.machines as f64]);
            }
        }
        out
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Deterministic instance generator.
pub fn generate(config: &GeneratorConfig) -> Result<Instance> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[purpose::GENERATE, config.problem as u64]);
    let r = &config.ranges;
    let inst = match config.problem {
        Problem::Cvrptw => {
            let n = config.nodes;
            let coords: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
            let dist0 = |i: usize| {
                let (dx, dy) = (coords[2 * i] - coords[0], coords[2 * i + 1] - coords[1]);
                libm::sqrt(dx * dx + dy * dy)
            };
            let mut demand = vec![0.0; n];
            let mut service = vec![0.0; n];
            let mut windows = vec![0.0; 2 * n];
            windows[1] = r.horizon;
            for i in 1..n {
                demand[i] = uniform(&mut rng, r.demand);
                service[i] = uniform(&mut rng, r.service);
                let d = dist0(i);
                let mut placed = false;
                for _ in 0..1000 {
                    let width = uniform(&mut rng, r.window_width);
                    let open = uniform(&mut rng, (0.0, r.horizon - width));
                    let close = open + width;
                    let arrive = d.max(open);
                    if arrive <= close && arrive + service[i] + d <= r.horizon {
                        windows[2 * i] = open;
                        windows[2 * i + 1] = close;
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    windows[2 * i] = 0.0;
                    windows[2 * i + 1] = r.horizon - service[i] - d;
                }
            }
            Instance::new(
                Problem::Cvrptw,
                n,
                vec![
                    FeatureTensor::new(COORDS, vec![n, 2], coords, Layout::PerNode)?,
                    FeatureTensor::new(DEMAND, vec![n], demand, Layout::PerNode)?,
                    FeatureTensor::new(WINDOWS, vec![n, 2], windows, Layout::PerNode)?,
                    FeatureTensor::new(SERVICE, vec![n], service, Layout::PerNode)?,
                    FeatureTensor::new(CAPACITY, vec![1], vec![r.capacity], Layout::Global)?,
                ],
                Problem::Cvrptw.families(),
                ProblemParams::Routing { depot: 0 },
            )?
        }
        Problem::Op => {
            let n = config.nodes;
            let budget = uniform(&mut rng, r.budget);
            // Resample the layout until at least one customer admits a round trip.
            let coords = loop {
                let c: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
                let reachable = (1..n).any(|i| {
                    let (dx, dy) = (c[2 * i] - c[0], c[2 * i + 1] - c[1]);
                    2.0 * libm::sqrt(dx * dx + dy * dy) <= budget
                });
                if reachable {
                    break c;
                }
            };
            let mut prize = vec![0.0; n];
            for p in prize.iter_mut().skip(1) {
                *p = uniform(&mut rng, r.prize);
            }
            Instance::new(
                Problem::Op,
                n,
                vec![
                    FeatureTensor::new(COORDS, vec![n, 2], coords, Layout::PerNode)?,
                    FeatureTensor::new(PRIZE, vec![n], prize, Layout::PerNode)?,
                    FeatureTensor::new(BUDGET, vec![1], vec![budget], Layout::Global)?,
                ],
                Problem::Op.families(),
                ProblemParams::Routing { depot: 0 },
            )?
        }
        Problem::Fjsp => {
            let (jobs, machines, per_job) = (config.jobs, config.machines, config.ops_per_job);
            let ops = jobs * per_job;
            let mut eligible = vec![false; ops * machines];
            let mut proc = vec![0.0; ops * machines];
            let mut count = vec![0.0; ops];
            for o in 0..ops {
                loop {
                    let row: Vec<bool> = (0..machines)
                        .map(|_| rng.random::<f64>() < r.eligibility_prob)
                        .collect();
                    if row.iter().any(|&e| e) {
                        eligible[o * machines..(o + 1) * machines].copy_from_slice(&row);
                        break;
                    }
                }
                for m in 0..machines {
                    if eligible[o * machines + m] {
                        proc[o * machines + m] = uniform(&mut rng, r.proc_time);
                        count[o] += 1.0;
                    }
                }
            }
            Instance::new(
                Problem::Fjsp,
                ops,
                vec![
                    FeatureTensor::new(PROC_TIME, vec![ops, machines], proc, Layout::PerNode)?,
                    FeatureTensor::new(ELIGIBLE_COUNT, vec![ops], count, Layout::PerNode)?,
                ],
                Problem::Fjsp.families(),
                ProblemParams::Shop {
                    jobs,
                    machines,
                    ops_per_job: per_job,
                    eligible,
                },
            )?
        }
    };
    Ok(inst)
}
