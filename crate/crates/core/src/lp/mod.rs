//! LP relaxations, a dense two-phase simplex with dual extraction, and the
//! aggregation of row duals into one multiplier per constraint family.

mod relax;
mod simplex;

pub use relax::{build_lp, build_lp_with, CapacityModel};
pub use simplex::{solve, LpSolution};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::instances::ConstraintFamily;
use crate::{Error, Result};

/// Row tag excluded from family aggregation.
pub const UNTAGGED: &str = "untagged";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Minimize,
    Maximize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Sparse `(variable, coefficient)` pairs.
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub objective: Objective,
    pub costs: Vec<f64>,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    /// `f64::INFINITY` for no upper bound.
    pub upper: Vec<f64>,
}

impl LinearProgram {
    pub fn new(objective: Objective, costs: Vec<f64>) -> Self {
        let n = costs.len();
        Self {
            objective,
            costs,
            rows: Vec::new(),
            lower: alloc::vec![0.0; n],
            upper: alloc::vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.costs.len()
    }

    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.costs.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.costs.len() - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64, tag: &str) {
        self.rows.push(Row {
            coeffs,
            sense,
            rhs,
            tag: tag.to_string(),
        });
    }

    pub fn rows_tagged(&self, tag: &str) -> usize {
        self.rows.iter().filter(|r| r.tag == tag).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Schema("bound vectors do not match variable count".into()));
        }
        let finite = |v: f64| v.is_finite();
        if !self.costs.iter().copied().all(finite) || !self.lower.iter().copied().all(finite) {
            return Err(Error::Schema("costs and lower bounds must be finite".into()));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if !r.rhs.is_finite() || r.coeffs.iter().any(|&(j, c)| j >= n || !c.is_finite()) {
                return Err(Error::Schema(format!("row {i} has invalid coefficients")));
            }
        }
        Ok(())
    }

    /// Plain row-oriented text dump for cross-checking with external solvers.
    pub fn to_text(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        let obj = match self.objective {
            Objective::Minimize => "min",
            Objective::Maximize => "max",
        };
        let _ = writeln!(s, "{obj} {}", self.num_vars());
        let costs: Vec<String> = self.costs.iter().map(|c| format!("{c}")).collect();
        let _ = writeln!(s, "c {}", costs.join(" "));
        for j in 0..self.num_vars() {
            let _ = writeln!(s, "b {j} {} {}", self.lower[j], self.upper[j]);
        }
        for r in &self.rows {
            let sense = match r.sense {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            let terms: Vec<String> = r.coeffs.iter().map(|(j, c)| format!("{c}*x{j}")).collect();
            let _ = writeln!(s, "r {} {} {sense} {}", r.tag, terms.join(" + "), r.rhs);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Mean, Aggregation::Sum, Aggregation::Max];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
            Self::Max => "max",
        }
    }
}

/// Per-family multipliers together with the raw row duals they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVector {
    /// `(family, lambda)` in family order.
    pub lambda: Vec<(String, f64)>,
    pub raw: Vec<f64>,
    pub tags: Vec<String>,
    pub aggregation: Aggregation,
    pub status: LpStatus,
    pub objective: f64,
}

impl DualVector {
    pub fn get(&self, family: &str) -> Option<f64> {
        self.lambda.iter().find(|(f, _)| f == family).map(|(_, v)| *v)
    }

    pub fn values(&self) -> Vec<f64> {
        self.lambda.iter().map(|(_, v)| *v).collect()
    }

    /// Re-aggregates the stored raw duals.
    pub fn reaggregate(&self, families: &[ConstraintFamily], aggregation: Aggregation) -> Result<DualVector> {
        let lambda = aggregate_duals(&self.raw, &self.tags, families, aggregation)?;
        Ok(DualVector {
            lambda,
            aggregation,
            ..self.clone()
        })
    }
}

/// `lambda_k = agg |dual|` over the rows tagged with family `k`'s row tag.
/// Families without rows get 0; rows tagged [`UNTAGGED`] are ignored.
pub fn aggregate_duals(
    raw: &[f64],
    tags: &[String],
    families: &[ConstraintFamily],
    aggregation: Aggregation,
) -> Result<Vec<(String, f64)>> {
    if raw.len() != tags.len() {
        return Err(Error::Schema("dual and tag vectors differ in length".into()));
    }
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (d, t) in raw.iter().zip(tags) {
        if t == UNTAGGED {
            continue;
        }
        if !families.iter().any(|f| &f.lp_row_tag == t) {
            return Err(Error::UnknownFamily(t.clone()));
        }
        groups.entry(t.as_str()).or_default().push(libm::fabs(*d));
    }
    Ok(families
        .iter()
        .map(|f| {
            let v = groups.get(f.lp_row_tag.as_str()).map_or(0.0, |g| match aggregation {
                Aggregation::Mean => g.iter().sum::<f64>() / g.len() as f64,
                Aggregation::Sum => g.iter().sum(),
                Aggregation::Max => g.iter().copied().fold(0.0, f64::max),
            });
            (f.name.clone(), v)
        })
        .collect())
}

/// Solves `lp` and aggregates its row duals per family.
pub fn solve_with_duals(lp: &LinearProgram, families: &[ConstraintFamily], aggregation: Aggregation) -> Result<(DualVector, LpSolution)> {
    let sol = solve(lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(sol.status));
    }
    let tags: Vec<String> = lp.rows.iter().map(|r| r.tag.clone()).collect();
    let lambda = aggregate_duals(&sol.row_duals, &tags, families, aggregation)?;
    Ok((
        DualVector {
            lambda,
            raw: sol.row_duals.clone(),
            tags,
            aggregation,
            status: sol.status,
            objective: sol.objective,
        },
        sol,
    ))
}
