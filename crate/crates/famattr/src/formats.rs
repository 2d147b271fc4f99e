//! On-disk formats: instance JSON, policy checkpoints, dual dumps and small
//! helpers shared by the writers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use famattr_core::instances::{canonical_layout, ConstraintFamily, FeatureTensor, Instance, ProblemParams};
use famattr_core::lp::DualVector;
use famattr_core::policy::{PolicyParams, TrainLog};
use famattr_core::{GeneratorConfig, Problem};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const CHECKPOINT_FORMAT: &str = "famattr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Instance JSON. Field order is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub problem: Problem,
    #[serde(rename = "N")]
    pub n: usize,
    pub tensors: BTreeMap<String, TensorFile>,
    pub params: ProblemParams,
    pub families: Vec<ConstraintFamily>,
}

impl From<&Instance> for InstanceFile {
    fn from(inst: &Instance) -> Self {
        Self {
            problem: inst.problem,
            n: inst.n_nodes,
            tensors: inst
                .tensors
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        TensorFile {
                            shape: t.shape.clone(),
                            values: t.values.clone(),
                        },
                    )
                })
                .collect(),
            params: inst.params.clone(),
            families: inst.families.clone(),
        }
    }
}

impl InstanceFile {
    pub fn into_instance(self) -> famattr_core::Result<Instance> {
        let tensors = self
            .tensors
            .into_iter()
            .map(|(k, t)| FeatureTensor::new(&k, t.shape, t.values, canonical_layout(&k)))
            .collect::<famattr_core::Result<Vec<_>>>()?;
        Instance::new(self.problem, self.n, tensors, self.families, self.params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub training: Option<TrainLog>,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, generator: GeneratorConfig, seed: u64, training: Option<TrainLog>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            generator,
            training,
            params,
        }
    }

    pub fn check(&self, path: &Path) -> AppResult<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(AppError::format(
                path,
                format!("expected {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}"),
            ));
        }
        self.params.validate()?;
        Ok(())
    }
}

/// LP duals of one instance, raw and aggregated every way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualRecord {
    pub seed: u64,
    pub instance: usize,
    pub objective: f64,
    pub tags: Vec<String>,
    pub raw: Vec<f64>,
    /// Aggregation name to `(family, lambda)` list.
    pub lambda: BTreeMap<String, Vec<(String, f64)>>,
}

impl DualRecord {
    pub fn new(seed: u64, instance: usize, duals: &DualVector, families: &[ConstraintFamily]) -> famattr_core::Result<Self> {
        let mut lambda = BTreeMap::new();
        for agg in famattr_core::lp::Aggregation::ALL {
            lambda.insert(agg.name().to_string(), duals.reaggregate(families, agg)?.lambda);
        }
        Ok(Self {
            seed,
            instance,
            objective: duals.objective,
            tags: duals.tags.clone(),
            raw: duals.raw.clone(),
            lambda,
        })
    }
}

pub fn require(path: &Path, hint: &str) -> AppResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(AppError::Missing {
            path: path.to_path_buf(),
            hint: hint.into(),
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(AppError::io(path))?;
    serde_json::from_str(&text).map_err(|e| AppError::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::format(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    fs::write(path, bytes).map_err(AppError::io(path))
}

pub fn read_instance(path: &Path) -> AppResult<Instance> {
    let file: InstanceFile = read_json(path)?;
    Ok(file.into_instance()?)
}

pub fn write_instance(path: &Path, instance: &Instance) -> AppResult<()> {
    write_json(path, &InstanceFile::from(instance))
}

/// Instance files of a directory in name order.
pub fn list_instances(dir: &Path) -> AppResult<Vec<PathBuf>> {
    require(dir, "run `famattr generate` first")?;
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(AppError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(AppError::Missing {
            path: dir.join("*.json"),
            hint: "no instance files; run `famattr generate` first".into(),
        });
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `name=value` pairs joined by `;`, values in shortest round-trip form.
pub fn join_named(values: &[(String, f64)]) -> String {
    values.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(";")
}

pub fn split_named(s: &str) -> Result<Vec<(String, f64)>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad pair `{kv}`"))?;
            Ok((k.to_string(), v.parse::<f64>().map_err(|e| format!("{e} in `{kv}`"))?))
        })
        .collect()
}

pub fn join_list<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub fn split_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|v| v.parse::<T>().map_err(|e| format!("{e} in `{v}`"))).collect()
}
