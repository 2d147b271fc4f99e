//! Dense two-phase primal simplex with Bland's rule.
//!
//! Variables are shifted to their lower bounds; finite upper bounds become
//! extra `<=` rows whose duals are reported separately from the user rows.
//! Every row keeps a unit column (slack or artificial) in the tableau, so the
//! duals are read off the final reduced costs of those columns.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{LinearProgram, LpStatus, Objective, Sense};
use crate::Result;

const PIVOT_TOL: f64 = 1e-9;
const MAX_PIVOTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Objective in the user's sense.
    pub objective: f64,
    pub x: Vec<f64>,
    /// One dual per user row. Sign convention: for maximisation, `<=` rows
    /// carry non-negative duals; for minimisation, `>=` rows do.
    pub row_duals: Vec<f64>,
    /// Duals of the finite upper bounds, by variable (0 where unbounded).
    pub upper_duals: Vec<f64>,
    /// Reduced costs `c - A^T y - upper_duals` in the user's sense.
    pub reduced_costs: Vec<f64>,
    /// `(row, column)` of every pivot, in order.
    pub pivots: Vec<(u32, u32)>,
}

impl LpSolution {
    fn failed(status: LpStatus, n: usize, m: usize, pivots: Vec<(u32, u32)>) -> Self {
        Self {
            status,
            objective: f64::NAN,
            x: vec![f64::NAN; n],
            row_duals: vec![f64::NAN; m],
            upper_duals: vec![f64::NAN; n],
            reduced_costs: vec![f64::NAN; n],
            pivots,
        }
    }
}

struct Tableau {
    t: Vec<Vec<f64>>,
    d: Vec<f64>,
    basis: Vec<usize>,
    cols: usize,
    pivots: Vec<(u32, u32)>,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[i][self.cols]
    }

    fn pivot(&mut self, r: usize, e: usize) {
        let piv = self.t[r][e];
        for v in self.t[r].iter_mut() {
            *v /= piv;
        }
        let prow = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[e];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(&prow) {
                    *v -= f * p;
                }
                row[e] = 0.0;
            }
        }
        let f = self.d[e];
        if f != 0.0 {
            for (v, p) in self.d.iter_mut().zip(&prow) {
                *v -= f * p;
            }
            self.d[e] = 0.0;
        }
        self.basis[r] = e;
        self.pivots.push((r as u32, e as u32));
    }

    fn price(&mut self, cost: &[f64]) {
        let mut d: Vec<f64> = cost.to_vec();
        d.push(0.0);
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (v, t) in d.iter_mut().zip(&self.t[i]) {
                    *v -= cb * t;
                }
            }
        }
        self.d = d;
    }

    /// Runs Bland's rule until optimal; `allowed` filters entering columns.
    fn optimize(&mut self, allowed: impl Fn(usize) -> bool) -> LpStatus {
        loop {
            if self.pivots.len() >= MAX_PIVOTS {
                return LpStatus::IterationLimit;
            }
            let Some(e) = (0..self.cols).find(|&j| allowed(j) && self.d[j] < -PIVOT_TOL) else {
                return LpStatus::Optimal;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.t.len() {
                let a = self.t[i][e];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best)) => {
                            let tie = (ratio - best).abs() <= 1e-12 * (1.0 + best.abs());
                            if ratio < best && !tie || tie && self.basis[i] < self.basis[r] {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, e),
                None => return LpStatus::Unbounded,
            }
        }
    }
}

pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.num_vars();
    let m_user = lp.rows.len();

    // Internal rows over shifted variables.
    let mut rows: Vec<(Vec<f64>, Sense, f64)> = Vec::new();
    for r in &lp.rows {
        let mut a = vec![0.0; n];
        for &(j, c) in &r.coeffs {
            a[j] += c;
        }
        let shift: f64 = a.iter().zip(&lp.lower).map(|(c, l)| c * l).sum();
        rows.push((a, r.sense, r.rhs - shift));
    }
    let mut bounded = Vec::new();
    for j in 0..n {
        if lp.upper[j].is_finite() {
            let mut a = vec![0.0; n];
            a[j] = 1.0;
            rows.push((a, Sense::Le, lp.upper[j] - lp.lower[j]));
            bounded.push(j);
        }
    }
    let m = rows.len();
    let mut flip = vec![1.0; m];
    for (i, (a, sense, b)) in rows.iter_mut().enumerate() {
        if *b < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
            *b = -*b;
            *sense = match *sense {
                Sense::Le => Sense::Ge,
                Sense::Ge => Sense::Le,
                Sense::Eq => Sense::Eq,
            };
            flip[i] = -1.0;
        }
    }

    // Column layout: structural | slacks | artificials.
    let mut slack_col = vec![usize::MAX; m];
    let mut art_col = vec![usize::MAX; m];
    let mut cols = n;
    for (i, (_, sense, _)) in rows.iter().enumerate() {
        if *sense != Sense::Eq {
            slack_col[i] = cols;
            cols += 1;
        }
    }
    let first_art = cols;
    for (i, (_, sense, _)) in rows.iter().enumerate() {
        if *sense != Sense::Le {
            art_col[i] = cols;
            cols += 1;
        }
    }
    let mut t = vec![vec![0.0; cols + 1]; m];
    let mut basis = vec![0; m];
    let mut unit_col = vec![0; m];
    for (i, (a, sense, b)) in rows.iter().enumerate() {
        t[i][..n].copy_from_slice(a);
        t[i][cols] = *b;
        match sense {
            Sense::Le => {
                t[i][slack_col[i]] = 1.0;
                basis[i] = slack_col[i];
                unit_col[i] = slack_col[i];
            }
            Sense::Ge => {
                t[i][slack_col[i]] = -1.0;
                t[i][art_col[i]] = 1.0;
                basis[i] = art_col[i];
                unit_col[i] = art_col[i];
            }
            Sense::Eq => {
                t[i][art_col[i]] = 1.0;
                basis[i] = art_col[i];
                unit_col[i] = art_col[i];
            }
        }
    }
    let mut tab = Tableau {
        t,
        d: Vec::new(),
        basis,
        cols,
        pivots: Vec::new(),
    };

    // Phase 1.
    if first_art < cols {
        let mut c1 = vec![0.0; cols];
        c1[first_art..].iter_mut().for_each(|c| *c = 1.0);
        tab.price(&c1);
        let status = tab.optimize(|j| j < first_art);
        if status != LpStatus::Optimal {
            return Ok(LpSolution::failed(status, n, m_user, tab.pivots));
        }
        let infeas: f64 = (0..m)
            .filter(|&i| tab.basis[i] >= first_art)
            .map(|i| tab.rhs(i))
            .sum();
        let scale = 1.0 + rows.iter().map(|r| r.2.abs()).fold(0.0, f64::max);
        if infeas > 1e-9 * scale {
            return Ok(LpSolution::failed(LpStatus::Infeasible, n, m_user, tab.pivots));
        }
        for i in 0..m {
            if tab.basis[i] >= first_art {
                if let Some(j) = (0..first_art).find(|&j| tab.t[i][j].abs() > PIVOT_TOL) {
                    tab.pivot(i, j);
                }
            }
        }
    }

    // Phase 2 in minimisation form.
    let sign = match lp.objective {
        Objective::Minimize => 1.0,
        Objective::Maximize => -1.0,
    };
    let mut c2 = vec![0.0; cols];
    for j in 0..n {
        c2[j] = sign * lp.costs[j];
    }
    tab.price(&c2);
    let status = tab.optimize(|j| j < first_art);
    if status != LpStatus::Optimal {
        return Ok(LpSolution::failed(status, n, m_user, tab.pivots));
    }

    let mut x = lp.lower.clone();
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] += tab.rhs(i);
        }
    }
    let objective: f64 = lp.costs.iter().zip(&x).map(|(c, x)| c * x).sum();
    // y_i = c_unit - d_unit with c_unit = 0, undone for row flips and the
    // objective sign.
    let dual = |i: usize| -tab.d[unit_col[i]] * flip[i] * sign;
    let row_duals: Vec<f64> = (0..m_user).map(dual).collect();
    let mut upper_duals = vec![0.0; n];
    for (k, &j) in bounded.iter().enumerate() {
        upper_duals[j] = dual(m_user + k);
    }
    let reduced_costs = (0..n).map(|j| sign * tab.d[j]).collect();
    Ok(LpSolution {
        status,
        objective,
        x,
        row_duals,
        upper_duals,
        reduced_costs,
        pivots: tab.pivots,
    })
}
