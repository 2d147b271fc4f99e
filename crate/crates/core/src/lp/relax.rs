//! LP relaxations of the three problems, with every row tagged by the
//! constraint family it belongs to.
//!
//! * CVRPTW: two-index arc flow. Degree rows are `spatial`; window bounds,
//!   big-M arrival-time (MTZ-style) rows and depot return rows are
//!   `time-window`; one aggregate fleet row `Q * sum x_0j >= sum q_i` is
//!   `capacity` (or per-arc load propagation with [`CapacityModel::LoadMtz`]).
//! * OP: degree and MTZ rows are `spatial`, one travel row is `budget`, one
//!   epigraph row `z <= sum p_i y_i` is `prize`.
//! * FJSP: one assignment row per operation is `eligibility`; chained start
//!   time and makespan rows are `precedence`.

use alloc::vec;
use alloc::vec::Vec;

use super::{LinearProgram, Objective, Sense};
use crate::instances::{Instance, Problem};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapacityModel {
    /// A single aggregate row on the number of routes.
    #[default]
    Aggregate,
    /// Load variables propagated along arcs, one row per customer pair.
    LoadMtz,
}

pub fn build_lp(instance: &Instance) -> LinearProgram {
    build_lp_with(instance, CapacityModel::Aggregate)
}

pub fn build_lp_with(instance: &Instance, capacity: CapacityModel) -> LinearProgram {
    match instance.problem {
        Problem::Cvrptw => cvrptw(instance, capacity),
        Problem::Op => op(instance),
        Problem::Fjsp => fjsp(instance),
    }
}

/// Arc variables `x_ij` for `i != j`, indexed through the returned table.
fn arcs(lp: &mut LinearProgram, inst: &Instance, cost: impl Fn(usize, usize) -> f64) -> Vec<Vec<usize>> {
    let n = inst.n_nodes;
    let mut idx = vec![vec![usize::MAX; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                idx[i][j] = lp.add_var(cost(i, j), 0.0, 1.0);
            }
        }
    }
    idx
}

fn cvrptw(inst: &Instance, capacity: CapacityModel) -> LinearProgram {
    let n = inst.n_nodes;
    let depot = inst.depot();
    let mut lp = LinearProgram::new(Objective::Minimize, Vec::new());
    let x = arcs(&mut lp, inst, |i, j| inst.dist(i, j));
    let (_, depot_close) = inst.window(depot);
    let t: Vec<usize> = (0..n).map(|_| lp.add_var(0.0, 0.0, f64::INFINITY)).collect();
    let customers: Vec<usize> = (0..n).filter(|&i| i != depot).collect();

    for &i in &customers {
        let out = (0..n).filter(|&j| j != i).map(|j| (x[i][j], 1.0)).collect();
        lp.add_row(out, Sense::Eq, 1.0, "spatial");
        let inn = (0..n).filter(|&j| j != i).map(|j| (x[j][i], 1.0)).collect();
        lp.add_row(inn, Sense::Eq, 1.0, "spatial");
    }
    let mut flow: Vec<(usize, f64)> = customers.iter().map(|&j| (x[depot][j], 1.0)).collect();
    flow.extend(customers.iter().map(|&j| (x[j][depot], -1.0)));
    lp.add_row(flow, Sense::Eq, 0.0, "spatial");

    for &i in &customers {
        let (open, close) = inst.window(i);
        lp.add_row(vec![(t[i], 1.0)], Sense::Ge, open, "time-window");
        lp.add_row(vec![(t[i], 1.0)], Sense::Le, close, "time-window");
    }
    for &i in &customers {
        let (_, close_i) = inst.window(i);
        let s = inst.service(i);
        for &j in &customers {
            if i == j {
                continue;
            }
            // t_j >= t_i + s_i + d_ij - M (1 - x_ij)
            let (open_j, _) = inst.window(j);
            let d = inst.dist(i, j);
            let big = (close_i + s + d - open_j).max(0.0);
            lp.add_row(
                vec![(t[i], 1.0), (t[j], -1.0), (x[i][j], big)],
                Sense::Le,
                big - s - d,
                "time-window",
            );
        }
        // Leaving the depot at time 0, and returning before it closes.
        let d0 = inst.dist(depot, i);
        lp.add_row(vec![(x[depot][i], d0), (t[i], -1.0)], Sense::Le, 0.0, "time-window");
        let big = (close_i + s + d0 - depot_close).max(0.0);
        lp.add_row(
            vec![(t[i], 1.0), (x[i][depot], big)],
            Sense::Le,
            depot_close + big - s - d0,
            "time-window",
        );
    }

    let q = inst.capacity();
    match capacity {
        CapacityModel::Aggregate => {
            let total: f64 = customers.iter().map(|&i| inst.demand(i)).sum();
            let row = customers.iter().map(|&j| (x[depot][j], q)).collect();
            lp.add_row(row, Sense::Ge, total, "capacity");
        }
        CapacityModel::LoadMtz => {
            let load: Vec<usize> = (0..n).map(|_| lp.add_var(0.0, 0.0, q.max(0.0))).collect();
            for &i in &customers {
                lp.add_row(vec![(load[i], 1.0)], Sense::Ge, inst.demand(i), "capacity");
                for &j in &customers {
                    if i != j {
                        // l_j >= l_i + q_j - Q (1 - x_ij)
                        lp.add_row(
                            vec![(load[i], 1.0), (load[j], -1.0), (x[i][j], q)],
                            Sense::Le,
                            q - inst.demand(j),
                            "capacity",
                        );
                    }
                }
            }
        }
    }
    lp
}

fn op(inst: &Instance) -> LinearProgram {
    let n = inst.n_nodes;
    let depot = inst.depot();
    let mut lp = LinearProgram::new(Objective::Maximize, Vec::new());
    let z = lp.add_var(1.0, 0.0, f64::INFINITY);
    let x = arcs(&mut lp, inst, |_, _| 0.0);
    let customers: Vec<usize> = (0..n).filter(|&i| i != depot).collect();
    let mut y = vec![usize::MAX; n];
    let mut u = vec![usize::MAX; n];
    let order_max = (n - 1).max(1) as f64;
    for &i in &customers {
        y[i] = lp.add_var(0.0, 0.0, 1.0);
        u[i] = lp.add_var(0.0, 1.0, order_max);
    }

    for &i in &customers {
        let mut out: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (x[i][j], 1.0)).collect();
        out.push((y[i], -1.0));
        lp.add_row(out, Sense::Eq, 0.0, "spatial");
        let mut inn: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (x[j][i], 1.0)).collect();
        inn.push((y[i], -1.0));
        lp.add_row(inn, Sense::Eq, 0.0, "spatial");
    }
    let leave = customers.iter().map(|&j| (x[depot][j], 1.0)).collect();
    lp.add_row(leave, Sense::Le, 1.0, "spatial");
    let mut flow: Vec<(usize, f64)> = customers.iter().map(|&j| (x[depot][j], 1.0)).collect();
    flow.extend(customers.iter().map(|&j| (x[j][depot], -1.0)));
    lp.add_row(flow, Sense::Eq, 0.0, "spatial");
    for &i in &customers {
        for &j in &customers {
            if i != j {
                // u_i - u_j + (N-1) x_ij <= N - 2
                lp.add_row(
                    vec![(u[i], 1.0), (u[j], -1.0), (x[i][j], order_max)],
                    Sense::Le,
                    order_max - 1.0,
                    "spatial",
                );
            }
        }
    }

    let mut travel = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                travel.push((x[i][j], inst.dist(i, j)));
            }
        }
    }
    lp.add_row(travel, Sense::Le, inst.budget(), "budget");

    let mut prize: Vec<(usize, f64)> = vec![(z, 1.0)];
    prize.extend(customers.iter().map(|&i| (y[i], -inst.prize(i))));
    lp.add_row(prize, Sense::Le, 0.0, "prize");
    lp
}

fn fjsp(inst: &Instance) -> LinearProgram {
    let (jobs, machines, per_job) = inst.shop_dims();
    let ops = jobs * per_job;
    let mut lp = LinearProgram::new(Objective::Minimize, Vec::new());
    let makespan = lp.add_var(1.0, 0.0, f64::INFINITY);
    let start: Vec<usize> = (0..ops).map(|_| lp.add_var(0.0, 0.0, f64::INFINITY)).collect();
    let mut assign: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ops];
    for (o, a) in assign.iter_mut().enumerate() {
        for m in 0..machines {
            if inst.eligible(o, m) {
                a.push((m, lp.add_var(0.0, 0.0, 1.0)));
            }
        }
    }
    for a in &assign {
        lp.add_row(a.iter().map(|&(_, v)| (v, 1.0)).collect(), Sense::Eq, 1.0, "eligibility");
    }
    for j in 0..jobs {
        for k in 0..per_job {
            let o = j * per_job + k;
            // S_o + sum_m p_om a_om <= S_next (or the makespan for the last op).
            let mut row: Vec<(usize, f64)> = vec![(start[o], 1.0)];
            row.extend(assign[o].iter().map(|&(m, v)| (v, inst.proc_time(o, m))));
            let succ = if k + 1 < per_job { start[o + 1] } else { makespan };
            row.push((succ, -1.0));
            lp.add_row(row, Sense::Le, 0.0, "precedence");
        }
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate, GeneratorConfig};
    use crate::lp::{solve, LpStatus};

    #[test]
    fn op_row_counts() {
        let inst = generate(&GeneratorConfig::op(4, 0)).unwrap();
        let lp = build_lp(&inst);
        // 3 customers: 6 degree + 2 depot + 6 MTZ.
        assert_eq!(lp.rows_tagged("spatial"), 14);
        assert_eq!(lp.rows_tagged("budget"), 1);
        assert_eq!(lp.rows_tagged("prize"), 1);
        let inst = generate(&GeneratorConfig::op(8, 0)).unwrap();
        let lp = build_lp(&inst);
        assert_eq!(lp.rows_tagged("spatial"), 2 * 7 + 2 + 7 * 6);
        assert_eq!(lp.rows_tagged("budget"), 1);
    }

    #[test]
    fn fjsp_one_assignment_row_per_operation() {
        let mut cfg = GeneratorConfig::fjsp(2, 2, 3);
        cfg.ops_per_job = 2;
        let inst = generate(&cfg).unwrap();
        let lp = build_lp(&inst);
        assert_eq!(lp.rows_tagged("eligibility"), inst.n_nodes);
        assert_eq!(lp.rows_tagged("precedence"), inst.n_nodes);
    }

    #[test]
    fn relaxations_solve_on_generated_instances() {
        for seed in 0..10 {
            for cfg in [
                GeneratorConfig::cvrptw(10, seed),
                GeneratorConfig::op(8, seed),
                GeneratorConfig::fjsp(3, 2, seed),
            ] {
                let inst = generate(&cfg).unwrap();
                let sol = solve(&build_lp(&inst)).unwrap();
                assert_eq!(sol.status, LpStatus::Optimal, "{:?} seed {seed}", inst.problem);
            }
            let inst = generate(&GeneratorConfig::cvrptw(8, seed)).unwrap();
            let sol = solve(&build_lp_with(&inst, CapacityModel::LoadMtz)).unwrap();
            assert_eq!(sol.status, LpStatus::Optimal);
        }
    }
}
