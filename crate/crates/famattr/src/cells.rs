//! `cells.csv`: one row per (seed, instance, step).
//!
//! The first line is a `#` comment carrying the schema version and the run
//! constants statistics need; a CSV header follows. List-valued columns are
//! `;`-joined, named lists are `name=value` pairs.

use std::collections::BTreeMap;
use std::path::Path;

use famattr_core::Problem;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Run constants stored in the comment line.
#[derive(Clone, Debug, PartialEq)]
pub struct CellsHeader {
    pub schema_version: u32,
    pub problem: Problem,
    pub master_seed: u64,
    pub resamples: usize,
    pub families: Vec<String>,
}

impl CellsHeader {
    pub fn render(&self) -> String {
        format!(
            "#schema_version={} problem={} master_seed={} resamples={} families={}\n",
            self.schema_version,
            self.problem.name(),
            self.master_seed,
            self.resamples,
            self.families.join(";")
        )
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let body = line.strip_prefix('#').ok_or("missing `#` schema line")?;
        let fields: BTreeMap<&str, &str> = body.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("schema line lacks `{k}`"));
        let schema_version: u32 = get("schema_version")?.parse().map_err(|e| format!("{e}"))?;
        if schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema version {schema_version} is not the supported version {SCHEMA_VERSION}"
            ));
        }
        Ok(Self {
            schema_version,
            problem: Problem::parse(get("problem")?).map_err(|e| e.to_string())?,
            master_seed: get("master_seed")?.parse().map_err(|e| format!("{e}"))?,
            resamples: get("resamples")?.parse().map_err(|e| format!("{e}"))?,
            families: get("families")?.split(';').map(String::from).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub instance: usize,
    pub step: usize,
    pub action: usize,
    pub n_feasible: usize,
    pub margin: Option<f64>,
    /// `sum |grad * x|` per family.
    pub family_mass: String,
    pub lp_lambda: String,
    pub lp_scores: String,
    pub lp_top1: String,
    pub lp_sum_top1: String,
    pub lp_max_top1: String,
    pub subgrad_lambda: String,
    pub subgrad_scores: String,
    pub subgrad_top1: String,
    pub proxy_scores: String,
    pub proxy_top1: String,
    pub cf_status: String,
    pub cf_verdict: String,
    pub cf_key: String,
    pub cf_l1: Option<f64>,
    pub cf_shot: Option<usize>,
    pub cf_flipped_action: Option<usize>,
    /// Default adjudication.
    pub cf_family: String,
    /// Adjudications over norm x normalisation, see [`SWEEP_ORDER`].
    pub cf_sweep: String,
    pub unc_candidates: usize,
    pub unc_flipping: usize,
    pub unc_flipping_arith: usize,
    pub pac_samples: usize,
    pub pac_k: Option<usize>,
    pub pac_rates: String,
    pub pac_subset: String,
    pub pac_k_per_test: Option<usize>,
}

/// Order of `cf_sweep` entries.
pub const SWEEP_ORDER: [&str; 6] = ["l1/raw", "l1/dim", "l2/raw", "l2/dim", "linf/raw", "linf/dim"];

impl CellRecord {
    pub fn certified(&self) -> bool {
        self.cf_status == "certified"
    }

    /// Top-1 family of `backend`, or `None` when it did not run.
    pub fn top1(&self, backend: &str) -> Option<&str> {
        let v = match backend {
            "lp" => &self.lp_top1,
            "subgrad" => &self.subgrad_top1,
            "proxy" => &self.proxy_top1,
            "lp-sum" => &self.lp_sum_top1,
            "lp-max" => &self.lp_max_top1,
            _ => return None,
        };
        (!v.is_empty()).then_some(v.as_str())
    }
}

pub fn write_cells(header: &CellsHeader, cells: &[CellRecord]) -> AppResult<Vec<u8>> {
    let mut out = header.render().into_bytes();
    {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(&mut out);
        for c in cells {
            w.serialize(c).map_err(|e| AppError::Config(format!("cells.csv: {e}")))?;
        }
        if cells.is_empty() {
            // Header only; serde cannot emit it without a row.
            w.write_record(cell_columns()).map_err(|e| AppError::Config(format!("cells.csv: {e}")))?;
        }
        w.flush().map_err(|e| AppError::Config(format!("cells.csv: {e}")))?;
    }
    Ok(out)
}

pub fn cell_columns() -> Vec<&'static str> {
    vec![
        "seed", "instance", "step", "action", "n_feasible", "margin", "family_mass", "lp_lambda", "lp_scores",
        "lp_top1", "lp_sum_top1", "lp_max_top1", "subgrad_lambda", "subgrad_scores", "subgrad_top1",
        "proxy_scores", "proxy_top1", "cf_status", "cf_verdict", "cf_key", "cf_l1", "cf_shot",
        "cf_flipped_action", "cf_family", "cf_sweep", "unc_candidates", "unc_flipping", "unc_flipping_arith",
        "pac_samples", "pac_k", "pac_rates", "pac_subset", "pac_k_per_test",
    ]
}

pub fn read_cells(path: &Path) -> AppResult<(CellsHeader, Vec<CellRecord>)> {
    crate::formats::require(path, "produce it with `famattr run`")?;
    let text = std::fs::read_to_string(path).map_err(AppError::io(path))?;
    parse_cells(&text).map_err(|m| AppError::format(path, m))
}

pub fn parse_cells(text: &str) -> Result<(CellsHeader, Vec<CellRecord>), String> {
    let (first, rest) = text.split_once('\n').ok_or("empty cells file")?;
    let header = CellsHeader::parse(first.trim_end())?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let cols: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    if cols != cell_columns() {
        return Err("column layout does not match the schema version".into());
    }
    let cells = r
        .deserialize()
        .collect::<Result<Vec<CellRecord>, _>>()
        .map_err(|e| e.to_string())?;
    Ok((header, cells))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub seed: u64,
    pub instance: usize,
    pub step: usize,
    pub shot: usize,
    pub key: String,
    pub l1: f64,
    pub flipped: bool,
    pub arith: bool,
    pub kept: bool,
}

pub fn write_candidates(rows: &[CandidateRow]) -> AppResult<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r).map_err(|e| AppError::Config(format!("candidates.csv: {e}")))?;
        }
        w.flush().map_err(|e| AppError::Config(format!("candidates.csv: {e}")))?;
    }
    Ok(out)
}

pub fn read_candidates(path: &Path) -> AppResult<Vec<CandidateRow>> {
    crate::formats::require(path, "enable `log_candidates` in the run config")?;
    let mut r = csv::Reader::from_path(path).map_err(|e| AppError::format(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AppError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn sample(seed: u64, status: &str) -> CellRecord {
        CellRecord {
            seed,
            instance: 1,
            step: 2,
            action: 3,
            n_feasible: 4,
            margin: Some(0.25),
            family_mass: "a=1;b=2".into(),
            lp_lambda: "a=0.5;b=0".into(),
            lp_scores: "a=0.5;b=0".into(),
            lp_top1: "a".into(),
            lp_sum_top1: "a".into(),
            lp_max_top1: "a".into(),
            subgrad_lambda: String::new(),
            subgrad_scores: String::new(),
            subgrad_top1: String::new(),
            proxy_scores: "a=1;b=2".into(),
            proxy_top1: "b".into(),
            cf_status: status.into(),
            cf_verdict: "feasible".into(),
            cf_key: "x".into(),
            cf_l1: Some(0.1),
            cf_shot: Some(5),
            cf_flipped_action: Some(0),
            cf_family: "a".into(),
            cf_sweep: "a;a;a;a;a;a".into(),
            unc_candidates: 8,
            unc_flipping: 2,
            unc_flipping_arith: 1,
            pac_samples: 70,
            pac_k: None,
            pac_rates: "0.5;0.7".into(),
            pac_subset: String::new(),
            pac_k_per_test: Some(2),
        }
    }

    fn header() -> CellsHeader {
        CellsHeader {
            schema_version: SCHEMA_VERSION,
            problem: Problem::Op,
            master_seed: 3,
            resamples: 100,
            families: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn round_trip() {
        let cells = vec![sample(0, "certified"), sample(1, "none")];
        let bytes = write_cells(&header(), &cells).unwrap();
        let (h, back) = parse_cells(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(h, header());
        assert_eq!(back, cells);
        assert_eq!(back[1].top1("subgrad"), None);
    }

    #[test]
    fn empty_file_keeps_header() {
        let bytes = write_cells(&header(), &[]).unwrap();
        let (_, back) = parse_cells(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn version_mismatch_is_refused() {
        let bytes = write_cells(&header(), &[sample(0, "none")]).unwrap();
        let text = String::from_utf8(bytes).unwrap().replacen("schema_version=1", "schema_version=2", 1);
        assert!(parse_cells(&text).unwrap_err().contains("schema version"));
    }
}
