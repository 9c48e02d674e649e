//! Sealed experiment records: a JSON manifest next to a float blob holding
//! the gate trajectory and any attached tensors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::archive::{decode_tensors, encode_tensors, sha256_hex, TensorEntry};
use super::{DataError, Result};
use crate::arch::ArchSpec;
use crate::gates::{GateSnapshot, GateState};
use crate::search::SearchResult;
use crate::tensor::Tensor;
use crate::train::TrainReport;

pub const RUN_FORMAT: &str = "scratchprune.run/v1";
pub const MANIFEST_FILE: &str = "run.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// The stage a run failed in, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
}

/// Collects a run's artifacts; [`RunBuilder::seal`] freezes them.
#[derive(Debug, Clone, Default)]
pub struct RunBuilder {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub arch: Option<ArchSpec>,
    pub gate_trajectory: Vec<GateSnapshot>,
    pub selected_snapshot: Option<usize>,
    pub search: Option<SearchResult>,
    pub train_reports: Vec<TrainReport>,
    pub referenced_files: Vec<PathBuf>,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub failure: Option<Failure>,
}

impl RunBuilder {
    pub fn new(config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self { config, seeds, ..Default::default() }
    }

    pub fn fail(&mut self, stage: &str, message: impl Into<String>) {
        self.failure = Some(Failure { stage: stage.into(), message: message.into() });
    }

    /// Fails if a referenced file is missing.
    pub fn seal(self) -> Result<RunRecord> {
        if let Some(missing) = self.referenced_files.iter().find(|p| !p.exists()) {
            return Err(DataError::Record(format!("referenced file {} does not exist", missing.display())));
        }
        if let Some(i) = self.selected_snapshot.filter(|&i| i >= self.gate_trajectory.len()) {
            return Err(DataError::Record(format!("selected snapshot {i} is outside the trajectory")));
        }
        let config_hash = sha256_hex(serde_json::to_string(&self.config)?.as_bytes());
        Ok(RunRecord {
            format: RUN_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash,
            config: self.config,
            seeds: self.seeds,
            arch: self.arch,
            gate_trajectory: self.gate_trajectory,
            selected_snapshot: self.selected_snapshot,
            search: self.search,
            train_reports: self.train_reports,
            referenced_files: self.referenced_files.iter().map(|p| p.display().to_string()).collect(),
            tensors: self.tensors,
            failure: self.failure,
        })
    }
}

/// An immutable experiment record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    format: String,
    tool_version: String,
    config_hash: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    arch: Option<ArchSpec>,
    gate_trajectory: Vec<GateSnapshot>,
    selected_snapshot: Option<usize>,
    search: Option<SearchResult>,
    train_reports: Vec<TrainReport>,
    referenced_files: Vec<String>,
    tensors: Vec<(String, Tensor<f32>)>,
    failure: Option<Failure>,
}

impl RunRecord {
    pub fn tool_version(&self) -> &str {
        &self.tool_version
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn config(&self) -> &serde_json::Value {
        &self.config
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn gate_trajectory(&self) -> &[GateSnapshot] {
        &self.gate_trajectory
    }

    pub fn selected_snapshot(&self) -> Option<&GateSnapshot> {
        self.selected_snapshot.map(|i| &self.gate_trajectory[i])
    }

    pub fn search(&self) -> Option<&SearchResult> {
        self.search.as_ref()
    }

    pub fn train_reports(&self) -> &[TrainReport] {
        &self.train_reports
    }

    pub fn referenced_files(&self) -> &[String] {
        &self.referenced_files
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn failure(&self) -> Option<&Failure> {
        self.failure.as_ref()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SnapshotEntry {
    epoch: usize,
    step: usize,
    sparsity: f64,
    val_accuracy: f64,
    train_loss: f64,
    /// Blob entries holding the gate vectors, one per gated layer.
    gates: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tool_version: String,
    config_hash: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    arch: Option<ArchSpec>,
    gate_trajectory: Vec<SnapshotEntry>,
    selected_snapshot: Option<usize>,
    search: Option<SearchResult>,
    train_reports: Vec<TrainReport>,
    referenced_files: Vec<String>,
    /// Indices of blob entries attached as named tensors.
    attached: Vec<usize>,
    failure: Option<Failure>,
    blob: Vec<TensorEntry>,
    blob_sha256: String,
}

/// Writes `dir/run.json` and `dir/tensors.bin`, creating `dir` if needed.
pub fn save_run(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut trajectory = Vec::with_capacity(record.gate_trajectory.len());
    for (i, snap) in record.gate_trajectory.iter().enumerate() {
        let mut ids = Vec::with_capacity(snap.gates.lambda.len());
        for (j, layer) in snap.gates.lambda.iter().enumerate() {
            ids.push(named.len());
            named.push((format!("gates/{i}/{j}"), Tensor::new([layer.len()], layer.clone()).expect("1-d")));
        }
        trajectory.push(SnapshotEntry {
            epoch: snap.epoch,
            step: snap.gates.step,
            sparsity: snap.sparsity,
            val_accuracy: snap.val_accuracy,
            train_loss: snap.train_loss,
            gates: ids,
        });
    }
    let attached = (named.len()..named.len() + record.tensors.len()).collect();
    named.extend(record.tensors.iter().cloned());
    let (blob_entries, blob) = encode_tensors(&named);
    let manifest = Manifest {
        format: record.format.clone(),
        tool_version: record.tool_version.clone(),
        config_hash: record.config_hash.clone(),
        config: record.config.clone(),
        seeds: record.seeds.clone(),
        arch: record.arch.clone(),
        gate_trajectory: trajectory,
        selected_snapshot: record.selected_snapshot,
        search: record.search.clone(),
        train_reports: record.train_reports.clone(),
        referenced_files: record.referenced_files.clone(),
        attached,
        failure: record.failure.clone(),
        blob: blob_entries,
        blob_sha256: sha256_hex(&blob),
    };
    let blob_path = dir.join(BLOB_FILE);
    std::fs::write(&blob_path, &blob).map_err(|e| DataError::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&manifest_path, text).map_err(|e| DataError::io(&manifest_path, e))
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| DataError::io(&manifest_path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or_default();
    if format != RUN_FORMAT {
        return Err(DataError::Version { found: format.into(), expected: RUN_FORMAT.into() });
    }
    let m: Manifest = serde_json::from_value(value)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = std::fs::read(&blob_path).map_err(|e| DataError::io(&blob_path, e))?;
    if sha256_hex(&blob) != m.blob_sha256 {
        return Err(DataError::Checksum(blob_path.display().to_string()));
    }
    let tensors = decode_tensors(&m.blob, &blob)?;
    let take = |i: usize| -> Result<&(String, Tensor<f32>)> {
        tensors.get(i).ok_or_else(|| DataError::Record(format!("blob entry {i} is missing")))
    };
    let mut trajectory = Vec::with_capacity(m.gate_trajectory.len());
    for s in &m.gate_trajectory {
        let lambda = s.gates.iter().map(|&i| Ok(take(i)?.1.data().to_vec())).collect::<Result<Vec<_>>>()?;
        trajectory.push(GateSnapshot {
            gates: GateState { lambda, step: s.step },
            val_accuracy: s.val_accuracy,
            epoch: s.epoch,
            sparsity: s.sparsity,
            train_loss: s.train_loss,
        });
    }
    let attached = m.attached.iter().map(|&i| take(i).cloned()).collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        format: m.format,
        tool_version: m.tool_version,
        config_hash: m.config_hash,
        config: m.config,
        seeds: m.seeds,
        arch: m.arch,
        gate_trajectory: trajectory,
        selected_snapshot: m.selected_snapshot,
        search: m.search,
        train_reports: m.train_reports,
        referenced_files: m.referenced_files,
        tensors: attached,
        failure: m.failure,
    })
}
