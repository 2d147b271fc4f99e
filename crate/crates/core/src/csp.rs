//! Two-tier feasibility decisions.
//!
//! [`arithmetic_feasible`] checks per-field bounds and is cheap enough to run
//! on every sampled perturbation. [`csp_feasible`] is a complete backtracking
//! search with propagation that decides whether the instance admits any
//! solution at all, under a time limit. A timeout is its own verdict and
//! never counts as infeasibility.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::TOL;
use crate::instances::{Instance, Problem};
use crate::{Error, Result};

/// Per-field bound checks.
pub fn arithmetic_feasible(instance: &Instance) -> bool {
    let n = instance.n_nodes;
    let in_box = |inst: &Instance| {
        inst.tensors[crate::instances::COORDS]
            .values
            .iter()
            .all(|&c| (0.0..=1.0).contains(&c))
    };
    match instance.problem {
        Problem::Cvrptw => {
            let cap = instance.capacity();
            let depot = instance.depot();
            cap > 0.0
                && in_box(instance)
                && (0..n).all(|i| {
                    let (open, close) = instance.window(i);
                    let demand_ok = i == depot || (instance.demand(i) > 0.0 && instance.demand(i) <= cap);
                    demand_ok && open < close && instance.service(i) >= 0.0
                })
        }
        Problem::Op => {
            let depot = instance.depot();
            instance.budget() > 0.0 && in_box(instance) && (0..n).all(|i| i == depot || instance.prize(i) > 0.0)
        }
        Problem::Fjsp => {
            let (_, machines, _) = instance.shop_dims();
            (0..n).all(|o| {
                let any = (0..machines).any(|m| instance.eligible(o, m));
                let positive = (0..machines).all(|m| !instance.eligible(o, m) || instance.proc_time(o, m) > 0.0);
                let count = instance.eligible_count(o);
                any && positive && count >= 1.0 && count <= machines as f64
            })
        }
    }
}

/// A running time budget.
pub trait Deadline {
    fn expired(&mut self) -> bool;
    fn elapsed_ms(&self) -> f64;
}

/// Source of deadlines; the std companion crate supplies a wall-clock one.
pub trait Clock {
    type Deadline: Deadline;
    fn start(&self, limit_ms: f64) -> Self::Deadline;
}

/// Deterministic clock that charges a fixed number of search nodes per
/// millisecond.
#[derive(Clone, Copy, Debug)]
pub struct NodeClock {
    pub nodes_per_ms: u64,
}

impl Default for NodeClock {
    fn default() -> Self {
        Self { nodes_per_ms: 10_000 }
    }
}

pub struct NodeDeadline {
    nodes: u64,
    limit: u64,
    per_ms: u64,
}

impl Deadline for NodeDeadline {
    fn expired(&mut self) -> bool {
        self.nodes += 1;
        self.nodes > self.limit
    }
    fn elapsed_ms(&self) -> f64 {
        self.nodes as f64 / self.per_ms as f64
    }
}

impl Clock for NodeClock {
    type Deadline = NodeDeadline;
    fn start(&self, limit_ms: f64) -> NodeDeadline {
        NodeDeadline {
            nodes: 0,
            limit: (limit_ms * self.nodes_per_ms as f64) as u64,
            per_ms: self.nodes_per_ms.max(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictStatus {
    Feasible,
    Infeasible,
    Timeout,
}

impl VerdictStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Feasible => "feasible",
            Self::Infeasible => "infeasible",
            Self::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Witness {
    /// Customer sequences, one per route.
    Routes(Vec<Vec<usize>>),
    /// Customers visited between leaving and re-entering the depot.
    Tour(Vec<usize>),
    /// Machine per operation.
    Assignment(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityVerdict {
    pub status: VerdictStatus,
    pub elapsed_ms: f64,
    pub witness: Option<Witness>,
}

/// Decision models. Defaults: unbounded CVRPTW fleet, OP tours that visit
/// at least one customer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CspModel {
    pub max_routes: Option<usize>,
    pub min_visits: usize,
}

impl Default for CspModel {
    fn default() -> Self {
        Self {
            max_routes: None,
            min_visits: 1,
        }
    }
}

pub fn csp_feasible<C: Clock>(instance: &Instance, time_limit_ms: f64, clock: &C) -> Result<FeasibilityVerdict> {
    csp_feasible_with(instance, &CspModel::default(), time_limit_ms, clock)
}

pub fn csp_feasible_with<C: Clock>(
    instance: &Instance,
    model: &CspModel,
    time_limit_ms: f64,
    clock: &C,
) -> Result<FeasibilityVerdict> {
    if !(time_limit_ms > 0.0) {
        return Err(Error::Config("certification time limit must be positive".into()));
    }
    let mut deadline = clock.start(time_limit_ms);
    let outcome = match instance.problem {
        Problem::Cvrptw => RoutingSearch::new(instance, model.max_routes).run(&mut deadline),
        Problem::Op => op_search(instance, model.min_visits, &mut deadline),
        Problem::Fjsp => fjsp_search(instance, &mut deadline),
    };
    let (status, witness) = match outcome {
        Search::Found(w) => (VerdictStatus::Feasible, Some(w)),
        Search::Exhausted => (VerdictStatus::Infeasible, None),
        Search::TimedOut => (VerdictStatus::Timeout, None),
    };
    Ok(FeasibilityVerdict {
        status,
        elapsed_ms: deadline.elapsed_ms(),
        witness,
    })
}

enum Search {
    Found(Witness),
    Exhausted,
    TimedOut,
}

#[derive(Clone, Copy)]
struct RouteHead {
    node: usize,
    time: f64,
    load: f64,
    len: usize,
}

struct RoutingSearch<'a> {
    inst: &'a Instance,
    max_routes: Option<usize>,
    routes: Vec<Vec<usize>>,
    unvisited: Vec<bool>,
    /// Load and time never decrease along a route, so a customer
    /// unreachable now stays unreachable on this route.
    monotone: bool,
}

impl<'a> RoutingSearch<'a> {
    fn new(inst: &'a Instance, max_routes: Option<usize>) -> Self {
        let mut unvisited = vec![true; inst.n_nodes];
        unvisited[inst.depot()] = false;
        Self {
            inst,
            max_routes,
            routes: vec![Vec::new()],
            unvisited,
            monotone: (0..inst.n_nodes).all(|i| inst.demand(i) >= 0.0 && inst.service(i) >= 0.0),
        }
    }

    /// Arrival time at `j` from `head`, if the window, capacity and the
    /// depot return all hold.
    fn extend(&self, head: RouteHead, j: usize) -> Option<RouteHead> {
        let inst = self.inst;
        let depot = inst.depot();
        let (open, close) = inst.window(j);
        let (_, depot_close) = inst.window(depot);
        let arrive = (head.time + inst.dist(head.node, j)).max(open);
        let load = head.load + inst.demand(j);
        let ok = load <= inst.capacity() + TOL
            && arrive <= close + TOL
            && arrive + inst.service(j) + inst.dist(j, depot) <= depot_close + TOL;
        ok.then(|| RouteHead {
            node: j,
            time: arrive + inst.service(j),
            load,
            len: head.len + 1,
        })
    }

    fn fresh(&self) -> RouteHead {
        RouteHead {
            node: self.inst.depot(),
            time: 0.0,
            load: 0.0,
            len: 0,
        }
    }

    fn routes_left(&self) -> Option<usize> {
        self.max_routes.map(|k| k.saturating_sub(self.routes.len()))
    }

    fn run(mut self, deadline: &mut impl Deadline) -> Search {
        if self.max_routes == Some(0) && self.unvisited.iter().any(|&u| u) {
            return Search::Exhausted;
        }
        let head = self.fresh();
        self.dfs(head, deadline)
    }

    fn dfs(&mut self, head: RouteHead, deadline: &mut impl Deadline) -> Search {
        if deadline.expired() {
            return Search::TimedOut;
        }
        let pending: Vec<usize> = (0..self.inst.n_nodes).filter(|&j| self.unvisited[j]).collect();
        if pending.is_empty() {
            let routes = self.routes.iter().filter(|r| !r.is_empty()).cloned().collect();
            return Search::Found(Witness::Routes(routes));
        }
        // Propagation: every pending customer must stay reachable, either
        // later on this route or on a fresh one.
        let fresh = self.fresh();
        let spare = self.routes_left().is_none_or(|k| k > 0);
        let mut all_singletons = true;
        for &c in &pending {
            let solo = self.extend(fresh, c).is_some();
            all_singletons &= solo;
            if self.monotone && self.extend(head, c).is_none() && !(spare && solo) {
                return Search::Exhausted;
            }
        }
        if let Some(k) = self.routes_left() {
            let need: f64 = pending.iter().map(|&c| self.inst.demand(c)).sum();
            let room = (self.inst.capacity() - head.load) + k as f64 * self.inst.capacity();
            if need > room + TOL {
                return Search::Exhausted;
            }
        } else if all_singletons {
            // Unbounded fleet: close this route and serve the rest alone.
            let mut routes: Vec<Vec<usize>> = self.routes.iter().filter(|r| !r.is_empty()).cloned().collect();
            routes.extend(pending.iter().map(|&c| vec![c]));
            return Search::Found(Witness::Routes(routes));
        }
        for &c in &pending {
            if let Some(next) = self.extend(head, c) {
                self.unvisited[c] = false;
                self.routes.last_mut().expect("open route").push(c);
                let r = self.dfs(next, deadline);
                self.routes.last_mut().expect("open route").pop();
                self.unvisited[c] = true;
                if !matches!(r, Search::Exhausted) {
                    return r;
                }
            }
        }
        if head.len > 0 && spare {
            self.routes.push(Vec::new());
            let r = self.dfs(fresh, deadline);
            self.routes.pop();
            return r;
        }
        Search::Exhausted
    }
}

fn op_search(inst: &Instance, min_visits: usize, deadline: &mut impl Deadline) -> Search {
    let depot = inst.depot();
    let customers: Vec<usize> = (0..inst.n_nodes).filter(|&i| i != depot).collect();
    if inst.budget() <= 0.0 || customers.iter().any(|&i| inst.prize(i) <= 0.0) {
        return Search::Exhausted;
    }
    if min_visits == 0 {
        return Search::Found(Witness::Tour(Vec::new()));
    }
    fn dfs(
        inst: &Instance,
        tour: &mut Vec<usize>,
        used: &mut Vec<bool>,
        left: f64,
        min_visits: usize,
        deadline: &mut impl Deadline,
    ) -> Search {
        if deadline.expired() {
            return Search::TimedOut;
        }
        let depot = inst.depot();
        let cur = tour.last().copied().unwrap_or(depot);
        if tour.len() >= min_visits {
            return Search::Found(Witness::Tour(tour.clone()));
        }
        for j in 0..inst.n_nodes {
            if j == depot || used[j] {
                continue;
            }
            let step = inst.dist(cur, j);
            // Budget propagation: the return trip must remain affordable.
            if step + inst.dist(j, depot) > left + TOL {
                continue;
            }
            used[j] = true;
            tour.push(j);
            let r = dfs(inst, tour, used, left - step, min_visits, deadline);
            tour.pop();
            used[j] = false;
            if !matches!(r, Search::Exhausted) {
                return r;
            }
        }
        Search::Exhausted
    }
    let mut used = vec![false; inst.n_nodes];
    dfs(inst, &mut Vec::new(), &mut used, inst.budget(), min_visits, deadline)
}

fn fjsp_search(inst: &Instance, deadline: &mut impl Deadline) -> Search {
    let (_, machines, _) = inst.shop_dims();
    let domains: Vec<Vec<usize>> = (0..inst.n_nodes)
        .map(|o| {
            (0..machines)
                .filter(|&m| inst.eligible(o, m) && inst.proc_time(o, m) > 0.0)
                .collect()
        })
        .collect();
    // Any assignment is precedence-feasible once every operation has a
    // machine: schedule jobs back to back.
    let mut assignment = Vec::with_capacity(inst.n_nodes);
    for dom in &domains {
        if deadline.expired() {
            return Search::TimedOut;
        }
        match dom.first() {
            Some(&m) => assignment.push(m),
            None => return Search::Exhausted,
        }
    }
    Search::Found(Witness::Assignment(assignment))
}

/// Checks a witness against the instance, independently of the search.
pub fn validate_witness(instance: &Instance, witness: &Witness) -> bool {
    match (instance.problem, witness) {
        (Problem::Cvrptw, Witness::Routes(routes)) => {
            let depot = instance.depot();
            let mut seen = vec![false; instance.n_nodes];
            for r in routes {
                if !route_ok(instance, r) {
                    return false;
                }
                for &c in r {
                    if c == depot || seen[c] {
                        return false;
                    }
                    seen[c] = true;
                }
            }
            (0..instance.n_nodes).all(|i| i == depot || seen[i])
        }
        (Problem::Op, Witness::Tour(tour)) => {
            let depot = instance.depot();
            let customers_ok = (0..instance.n_nodes).all(|i| i == depot || instance.prize(i) > 0.0);
            let mut seen = vec![false; instance.n_nodes];
            let distinct = tour.iter().all(|&c| c != depot && !core::mem::replace(&mut seen[c], true));
            customers_ok && distinct && !tour.is_empty() && tour_length(instance, tour) <= instance.budget() + TOL
        }
        (Problem::Fjsp, Witness::Assignment(a)) => {
            a.len() == instance.n_nodes
                && a.iter()
                    .enumerate()
                    .all(|(o, &m)| instance.eligible(o, m) && instance.proc_time(o, m) > 0.0)
        }
        _ => false,
    }
}

fn tour_length(inst: &Instance, tour: &[usize]) -> f64 {
    let depot = inst.depot();
    let mut cur = depot;
    let mut len = 0.0;
    for &c in tour {
        len += inst.dist(cur, c);
        cur = c;
    }
    len + inst.dist(cur, depot)
}

/// Simulates one route from the depot: capacity, windows with waiting, and
/// the return before the depot closes.
fn route_ok(inst: &Instance, route: &[usize]) -> bool {
    let depot = inst.depot();
    let (_, depot_close) = inst.window(depot);
    let (mut cur, mut time, mut load) = (depot, 0.0, 0.0);
    for &c in route {
        let (open, close) = inst.window(c);
        let arrive = (time + inst.dist(cur, c)).max(open);
        load += inst.demand(c);
        if arrive > close + TOL || load > inst.capacity() + TOL {
            return false;
        }
        time = arrive + inst.service(c);
        cur = c;
    }
    time + inst.dist(cur, depot) <= depot_close + TOL
}

/// Largest instance accepted by [`enumerate_oracle`].
pub const ENUMERATION_CAP: usize = 6;

/// Exhaustive ground truth for small instances under the default model.
pub fn enumerate_oracle(instance: &Instance) -> Result<bool> {
    enumerate_oracle_with(instance, &CspModel::default())
}

pub fn enumerate_oracle_with(instance: &Instance, model: &CspModel) -> Result<bool> {
    if instance.n_nodes > ENUMERATION_CAP {
        return Err(Error::TooLarge(instance.n_nodes));
    }
    let depot = instance.depot();
    let customers: Vec<usize> = (0..instance.n_nodes).filter(|&i| i != depot).collect();
    Ok(match instance.problem {
        Problem::Cvrptw => {
            // Every permutation, cut into consecutive routes at every subset
            // of the gaps.
            let mut found = false;
            for_each_permutation(&customers, &mut |perm| {
                let gaps = perm.len().saturating_sub(1);
                for cuts in 0u32..(1 << gaps) {
                    let mut routes: Vec<&[usize]> = Vec::new();
                    let mut start = 0;
                    for g in 0..gaps {
                        if cuts & (1 << g) != 0 {
                            routes.push(&perm[start..=g]);
                            start = g + 1;
                        }
                    }
                    if !perm.is_empty() {
                        routes.push(&perm[start..]);
                    }
                    let fleet_ok = model.max_routes.is_none_or(|k| routes.len() <= k);
                    if fleet_ok && routes.iter().all(|r| route_ok(instance, r)) {
                        found = true;
                    }
                }
            });
            found
        }
        Problem::Op => {
            let prizes_ok = instance.budget() > 0.0 && customers.iter().all(|&i| instance.prize(i) > 0.0);
            let mut found = model.min_visits == 0;
            // Ordered subsets = prefixes of permutations.
            for_each_permutation(&customers, &mut |perm| {
                for len in model.min_visits.max(1)..=perm.len() {
                    if tour_length(instance, &perm[..len]) <= instance.budget() + TOL {
                        found = true;
                    }
                }
            });
            prizes_ok && found
        }
        Problem::Fjsp => {
            let (_, machines, _) = instance.shop_dims();
            let n = instance.n_nodes;
            let total = (machines as u64).pow(n as u32);
            (0..total).any(|code| {
                let mut c = code;
                (0..n).all(|o| {
                    let m = (c % machines as u64) as usize;
                    c /= machines as u64;
                    instance.eligible(o, m) && instance.proc_time(o, m) > 0.0
                })
            })
        }
    })
}

fn for_each_permutation(items: &[usize], f: &mut impl FnMut(&[usize])) {
    fn rec(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            rec(items, k + 1, f);
            items.swap(k, i);
        }
    }
    let mut v = items.to_vec();
    rec(&mut v, 0, f);
}
