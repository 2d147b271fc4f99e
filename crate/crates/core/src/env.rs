//! Step semantics: transitions, feasible-action masks and the dynamic
//! quantities the policy reads.
//!
//! Action spaces:
//! * CVRPTW: `0` returns to the depot (and opens a fresh route), `j >= 1`
//!   visits customer `j`. Early arrivals wait for the window to open.
//! * OP: `0` terminates the tour at the depot, `j >= 1` visits node `j`.
//! * FJSP: `job * machines + machine` schedules the job's next operation.

use alloc::vec;
use alloc::vec::Vec;

use crate::instances::{Instance, Problem};
use crate::{Error, Result};

/// Slack used when comparing accumulated times and budgets.
pub const TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    Cvrptw {
        current: usize,
        load_left: f64,
        time: f64,
        visited: Vec<bool>,
    },
    Op {
        current: usize,
        budget_left: f64,
        visited: Vec<bool>,
        finished: bool,
    },
    Fjsp {
        machine_free: Vec<f64>,
        job_ready: Vec<f64>,
        next_op: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState<'a> {
    pub instance: &'a Instance,
    pub step: usize,
    pub prefix: Vec<usize>,
    pub dynamics: Dynamics,
    pub mask: Vec<bool>,
}

/// What an action does, for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    Visit,
    Depot,
    Schedule,
}

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Visit => "visit",
            ActionKind::Depot => "depot",
            ActionKind::Schedule => "schedule",
        }
    }
}

pub fn action_count(instance: &Instance) -> usize {
    match instance.problem {
        Problem::Cvrptw | Problem::Op => instance.n_nodes,
        Problem::Fjsp => {
            let (jobs, machines, _) = instance.shop_dims();
            jobs * machines
        }
    }
}

pub fn action_kind(instance: &Instance, action: usize) -> ActionKind {
    match instance.problem {
        Problem::Fjsp => ActionKind::Schedule,
        _ if action == instance.depot() => ActionKind::Depot,
        _ => ActionKind::Visit,
    }
}

pub fn initial_state(instance: &Instance) -> PolicyState<'_> {
    let n = instance.n_nodes;
    let dynamics = match instance.problem {
        Problem::Cvrptw => {
            let mut visited = vec![false; n];
            visited[instance.depot()] = true;
            Dynamics::Cvrptw {
                current: instance.depot(),
                load_left: instance.capacity(),
                time: 0.0,
                visited,
            }
        }
        Problem::Op => {
            let mut visited = vec![false; n];
            visited[instance.depot()] = true;
            Dynamics::Op {
                current: instance.depot(),
                budget_left: instance.budget(),
                visited,
                finished: false,
            }
        }
        Problem::Fjsp => {
            let (jobs, machines, _) = instance.shop_dims();
            Dynamics::Fjsp {
                machine_free: vec![0.0; machines],
                job_ready: vec![0.0; jobs],
                next_op: vec![0; jobs],
            }
        }
    };
    let mut state = PolicyState {
        instance,
        step: 0,
        prefix: Vec::new(),
        dynamics,
        mask: Vec::new(),
    };
    state.mask = compute_mask(&state);
    state
}

fn compute_mask(state: &PolicyState<'_>) -> Vec<bool> {
    let inst = state.instance;
    let depot = inst.depot();
    match &state.dynamics {
        Dynamics::Cvrptw {
            current,
            load_left,
            time,
            visited,
        } => {
            let (_, depot_close) = inst.window(depot);
            let mut mask: Vec<bool> = (0..inst.n_nodes)
                .map(|j| {
                    if visited[j] {
                        return false;
                    }
                    let (open, close) = inst.window(j);
                    let arrive = (time + inst.dist(*current, j)).max(open);
                    inst.demand(j) <= load_left + TOL
                        && arrive <= close + TOL
                        && arrive + inst.service(j) + inst.dist(j, depot) <= depot_close + TOL
                })
                .collect();
            mask[depot] = *current != depot;
            mask
        }
        Dynamics::Op {
            current,
            budget_left,
            visited,
            finished,
        } => {
            if *finished {
                return vec![false; inst.n_nodes];
            }
            let mut mask: Vec<bool> = (0..inst.n_nodes)
                .map(|j| {
                    !visited[j]
                        && inst.dist(*current, j) + inst.dist(j, depot) <= budget_left + TOL
                })
                .collect();
            mask[depot] = true;
            mask
        }
        Dynamics::Fjsp { next_op, .. } => {
            let (jobs, machines, per_job) = inst.shop_dims();
            let mut mask = vec![false; jobs * machines];
            for j in 0..jobs {
                if next_op[j] < per_job {
                    let op = j * per_job + next_op[j];
                    for m in 0..machines {
                        mask[j * machines + m] = inst.eligible(op, m);
                    }
                }
            }
            mask
        }
    }
}

impl<'a> PolicyState<'a> {
    pub fn is_terminal(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// True when the episode ended normally rather than at a dead end.
    pub fn is_complete(&self) -> bool {
        match &self.dynamics {
            Dynamics::Cvrptw { current, visited, .. } => {
                *current == self.instance.depot() && visited.iter().all(|&v| v)
            }
            Dynamics::Op { finished, .. } => *finished,
            Dynamics::Fjsp { next_op, .. } => {
                let (_, _, per_job) = self.instance.shop_dims();
                next_op.iter().all(|&k| k == per_job)
            }
        }
    }

    pub fn feasible_mask(&self) -> Result<&[bool]> {
        if self.is_terminal() {
            Err(Error::Terminal)
        } else {
            Ok(&self.mask)
        }
    }

    pub fn feasible_actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(a, &m)| m.then_some(a))
    }

    /// Dynamic scalars fed to the policy context.
    pub fn context_scalars(&self) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Cvrptw { load_left, time, .. } => vec![*load_left, *time],
            Dynamics::Op { budget_left, .. } => vec![*budget_left],
            Dynamics::Fjsp {
                machine_free,
                next_op,
                ..
            } => {
                let (_, _, per_job) = self.instance.shop_dims();
                let makespan = machine_free.iter().copied().fold(0.0, f64::max);
                let done = next_op.iter().sum::<usize>() as f64;
                let total = (next_op.len() * per_job).max(1) as f64;
                vec![makespan, done / total]
            }
        }
    }

    /// Current node for routing problems.
    pub fn current_node(&self) -> Option<usize> {
        match &self.dynamics {
            Dynamics::Cvrptw { current, .. } | Dynamics::Op { current, .. } => Some(*current),
            Dynamics::Fjsp { .. } => None,
        }
    }

    /// Operation scheduled by FJSP action `action`, with its start time.
    pub fn fjsp_target(&self, action: usize) -> Option<(usize, usize, f64)> {
        match &self.dynamics {
            Dynamics::Fjsp {
                machine_free,
                job_ready,
                next_op,
            } => {
                let (_, machines, per_job) = self.instance.shop_dims();
                let (job, machine) = (action / machines, action % machines);
                (next_op[job] < per_job).then(|| {
                    (
                        job * per_job + next_op[job],
                        machine,
                        machine_free[machine].max(job_ready[job]),
                    )
                })
            }
            _ => None,
        }
    }

    pub fn transition(&self, action: usize) -> Result<PolicyState<'a>> {
        if !self.mask.get(action).copied().unwrap_or(false) {
            return Err(Error::InfeasibleAction(action));
        }
        let inst = self.instance;
        let depot = inst.depot();
        let dynamics = match &self.dynamics {
            Dynamics::Cvrptw {
                current,
                load_left,
                time,
                visited,
            } => {
                if action == depot {
                    Dynamics::Cvrptw {
                        current: depot,
                        load_left: inst.capacity(),
                        time: 0.0,
                        visited: visited.clone(),
                    }
                } else {
                    let mut visited = visited.clone();
                    visited[action] = true;
                    let (open, _) = inst.window(action);
                    let arrive = (time + inst.dist(*current, action)).max(open);
                    Dynamics::Cvrptw {
                        current: action,
                        load_left: load_left - inst.demand(action),
                        time: arrive + inst.service(action),
                        visited,
                    }
                }
            }
            Dynamics::Op {
                current,
                budget_left,
                visited,
                ..
            } => {
                let mut visited = visited.clone();
                visited[action] = true;
                Dynamics::Op {
                    current: action,
                    budget_left: budget_left - inst.dist(*current, action),
                    visited,
                    finished: action == depot,
                }
            }
            Dynamics::Fjsp {
                machine_free,
                job_ready,
                next_op,
            } => {
                let (op, machine, start) = self.fjsp_target(action).ok_or(Error::InfeasibleAction(action))?;
                let job = action / machine_free.len();
                let end = start + inst.proc_time(op, machine);
                let mut machine_free = machine_free.clone();
                let mut job_ready = job_ready.clone();
                let mut next_op = next_op.clone();
                machine_free[machine] = end;
                job_ready[job] = end;
                next_op[job] += 1;
                Dynamics::Fjsp {
                    machine_free,
                    job_ready,
                    next_op,
                }
            }
        };
        let mut prefix = self.prefix.clone();
        prefix.push(action);
        let mut next = PolicyState {
            instance: inst,
            step: self.step + 1,
            prefix,
            dynamics,
            mask: Vec::new(),
        };
        next.mask = compute_mask(&next);
        Ok(next)
    }
}

/// Replays `prefix` from the initial state of `instance`.
pub fn replay<'a>(instance: &'a Instance, prefix: &[usize]) -> Result<PolicyState<'a>> {
    let mut state = initial_state(instance);
    for &a in prefix {
        state = state.transition(a)?;
    }
    Ok(state)
}

/// Objective of a finished episode: travel for CVRPTW, negated prize for OP,
/// makespan for FJSP (lower is better for all three).
pub fn episode_cost(state: &PolicyState<'_>) -> f64 {
    let inst = state.instance;
    match &state.dynamics {
        Dynamics::Cvrptw { .. } | Dynamics::Op { .. } => {
            let mut cur = inst.depot();
            let mut travel = 0.0;
            for &a in &state.prefix {
                travel += inst.dist(cur, a);
                cur = a;
            }
            if inst.problem == Problem::Cvrptw {
                travel + inst.dist(cur, inst.depot())
            } else {
                -state.prefix.iter().map(|&a| inst.prize(a)).sum::<f64>()
            }
        }
        Dynamics::Fjsp { machine_free, .. } => machine_free.iter().copied().fold(0.0, f64::max),
    }
}
