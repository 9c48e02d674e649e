//! Pruned-structure similarity: per-layer keep ratios, Pearson matrices and
//! the pre-training study that compares structures found from random
//! weights with structures found from trained checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{count_flops, place_gates, ArchError, ArchSpec, ChannelConfig};
use crate::data::{DataError, Dataset};
use crate::gates::{learn_channel_importance, select_best_gates, GateError, ImportanceConfig};
use crate::model::Model;
use crate::search::{search_structure, SearchConfig, SearchError, SearchResult};
use crate::train::{train_from_scratch, train_with_hook, TrainError, TrainReport, TrainSchedule};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("feature {0} has zero variance")]
    Degenerate(String),
    #[error("invalid feature set: {0}")]
    Features(String),
    #[error("malformed matrix file: {0}")]
    Parse(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Gates(#[from] GateError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Kept/original channel ratio of every gated layer, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureFeature {
    pub label: String,
    pub ratios: Vec<f64>,
}

pub fn structure_feature(config: &ChannelConfig, base: &ArchSpec, label: impl Into<String>) -> Result<StructureFeature> {
    let placement = place_gates(base)?;
    config.validate(base, &placement)?;
    let ratios = config
        .kept_counts
        .iter()
        .zip(placement.widths(base))
        .map(|(&k, w)| k as f64 / w as f64)
        .collect();
    Ok(StructureFeature { label: label.into(), ratios })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn correlation_matrix(features: &[StructureFeature]) -> Result<SimilarityMatrix> {
    if features.len() < 2 {
        return Err(AnalysisError::Features(format!("need at least 2 features, got {}", features.len())));
    }
    let len = features[0].ratios.len();
    if let Some(f) = features.iter().find(|f| f.ratios.len() != len) {
        return Err(AnalysisError::Features(format!("{} has {} entries, expected {len}", f.label, f.ratios.len())));
    }
    for f in features {
        if f.ratios.iter().all(|&r| r == f.ratios[0]) {
            return Err(AnalysisError::Degenerate(f.label.clone()));
        }
    }
    let n = features.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = pearson(&features[i].ratios, &features[j].ratios).expect("variance checked");
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(SimilarityMatrix { labels: features.iter().map(|f| f.label.clone()).collect(), values })
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Symmetric, unit diagonal, entries in `[-1, 1]`.
    pub fn is_well_formed(&self) -> bool {
        let n = self.len();
        self.values.len() == n
            && self.values.iter().all(|row| row.len() == n)
            && (0..n).all(|i| {
                self.values[i][i] == 1.0
                    && (0..n).all(|j| self.values[i][j] == self.values[j][i] && self.values[i][j].abs() <= 1.0)
            })
    }

    /// Mean over unordered off-diagonal pairs.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.len();
        let pairs: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.values[i][j]).collect();
        pairs.iter().sum::<f64>() / pairs.len().max(1) as f64
    }

    /// Header row `label,<labels…>`, then one row per label.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).map_err(DataError::from)?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(DataError::from)?;
        }
        let bytes = w.into_inner().map_err(|e| DataError::Record(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(DataError::from)?.clone();
        let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut values = Vec::with_capacity(labels.len());
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(DataError::from)?;
            if rec.get(0) != labels.get(i).map(String::as_str) {
                return Err(AnalysisError::Parse(format!("row {i} label does not match the header")));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| AnalysisError::Parse(format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        let m = Self { labels, values };
        if m.values.len() != m.len() || m.values.iter().any(|r| r.len() != m.len()) {
            return Err(AnalysisError::Parse("matrix is not square".into()));
        }
        Ok(m)
    }
}

/// Where a structure's gates were learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    RandomInit,
    Checkpoint(usize),
}

impl Source {
    pub fn tag(&self) -> String {
        match self {
            Source::RandomInit => "rand".into(),
            Source::Checkpoint(e) => format!("e{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Architecture after channel expansion.
    pub arch: ArchSpec,
    /// Pre-training epochs after which checkpoints are taken; 0 stands for
    /// the random initialization itself.
    pub checkpoint_epochs: Vec<usize>,
    pub seeds: Vec<u64>,
    pub budget_ratio: f64,
    pub importance: ImportanceConfig,
    pub max_iters: usize,
    pub tolerance: f64,
    pub pretrain: TrainSchedule,
    /// Schedule for structures trained from scratch; budget scaling is
    /// applied on top when `budget_training` is set.
    pub scratch: TrainSchedule,
    pub budget_training: bool,
    pub lottery_init: bool,
}

pub struct StudyData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRun {
    pub seed: u64,
    pub source: Source,
    pub feature: StructureFeature,
    pub search: SearchResult,
    pub report: TrainReport,
    pub flops_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub flops_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBundle {
    pub sources: Vec<Source>,
    pub runs: Vec<StructureRun>,
    /// One matrix per seed over that seed's structures.
    pub per_seed: Vec<(u64, SimilarityMatrix)>,
    /// Named matrices across seeds (one per source, plus all checkpoints).
    pub cross_seed: Vec<(String, SimilarityMatrix)>,
    pub gated_layers: Vec<usize>,
    pub original_widths: Vec<usize>,
    pub summary: Vec<SummaryRow>,
}

impl StudyBundle {
    pub fn runs_from(&self, source: Source) -> impl Iterator<Item = &StructureRun> {
        self.runs.iter().filter(move |r| r.source == source)
    }
}

fn sources(checkpoint_epochs: &[usize]) -> Vec<Source> {
    let mut epochs: Vec<usize> = checkpoint_epochs.iter().copied().filter(|&e| e > 0).collect();
    epochs.sort_unstable();
    epochs.dedup();
    std::iter::once(Source::RandomInit).chain(epochs.into_iter().map(Source::Checkpoint)).collect()
}

/// For every seed: pre-trains the full model saving checkpoints, learns
/// gates from the random init and from each checkpoint, searches a
/// structure at the budget and trains it from scratch.
pub fn run_pretrain_effect_study(cfg: &StudyConfig, data: &StudyData<'_>) -> Result<StudyBundle> {
    let sources = sources(&cfg.checkpoint_epochs);
    let placement = place_gates(&cfg.arch)?;
    let full_flops = count_flops(&cfg.arch, None)?;
    let budget = (cfg.budget_ratio * full_flops as f64).round() as u64;
    let search_cfg = SearchConfig { max_iters: cfg.max_iters, rel_tolerance: cfg.tolerance, ..SearchConfig::new(budget) };
    let importance = ImportanceConfig { target_sparsity: cfg.budget_ratio, ..cfg.importance.clone() };
    let mut runs = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let init = Model::<f32>::full(&cfg.arch, seed)?;
        let checkpoints = pretrain_checkpoints(&init, &sources, cfg, data, seed)?;
        let mut seed_features = Vec::new();
        for (&source, start) in sources.iter().zip(checkpoints) {
            let mut gated = start;
            let snapshots = learn_channel_importance(&mut gated, data.train, data.val, &importance, seed)?;
            let best = select_best_gates(&snapshots, importance.target_sparsity)?;
            let search = search_structure(&best.gates, &cfg.arch, &search_cfg)?;
            let label = format!("s{seed}/{}", source.tag());
            let feature = structure_feature(&search.config, &cfg.arch, label.clone())?;
            let mut model = if cfg.lottery_init {
                init.lottery_slice(&search.config)?
            } else {
                Model::generate(&cfg.arch, &search.config, seed)?
            };
            let schedule = if cfg.budget_training {
                cfg.scratch.clone().with_budget(full_flops, search.achieved_flops)?
            } else {
                cfg.scratch.clone()
            };
            let report = train_from_scratch(&mut model, data.train, Some(data.val), data.test, &schedule, seed)?;
            log::info!(
                "{label}: flops ratio {:.3}, test accuracy {:.4}",
                search.achieved_flops as f64 / full_flops as f64,
                report.test_accuracy
            );
            seed_features.push(feature.clone());
            runs.push(StructureRun {
                seed,
                source,
                feature,
                flops_ratio: search.achieved_flops as f64 / full_flops as f64,
                search,
                report,
            });
        }
        if seed_features.len() >= 2 {
            per_seed.push((seed, correlation_matrix(&seed_features)?));
        }
    }
    let mut cross_seed = Vec::new();
    if cfg.seeds.len() >= 2 {
        for &source in &sources {
            let feats: Vec<StructureFeature> =
                runs.iter().filter(|r| r.source == source).map(|r| r.feature.clone()).collect();
            cross_seed.push((source.tag(), correlation_matrix(&feats)?));
        }
    }
    let checkpoint_feats: Vec<StructureFeature> =
        runs.iter().filter(|r| r.source != Source::RandomInit).map(|r| r.feature.clone()).collect();
    if checkpoint_feats.len() >= 2 && sources.len() > 2 {
        cross_seed.push(("checkpoints".into(), correlation_matrix(&checkpoint_feats)?));
    }
    let summary = sources
        .iter()
        .map(|&source| {
            let accs: Vec<f64> = runs.iter().filter(|r| r.source == source).map(|r| r.report.test_accuracy).collect();
            let ratios: Vec<f64> = runs.iter().filter(|r| r.source == source).map(|r| r.flops_ratio).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            SummaryRow { label: source.tag(), mean_acc, std_acc, flops_ratio: mean_std(&ratios).0 }
        })
        .collect();
    Ok(StudyBundle {
        sources,
        runs,
        per_seed,
        cross_seed,
        gated_layers: placement.gated_layer_ids(),
        original_widths: placement.widths(&cfg.arch),
        summary,
    })
}

/// Model states for every source: the init itself, then pre-training
/// snapshots in epoch order.
fn pretrain_checkpoints(
    init: &Model<f32>,
    sources: &[Source],
    cfg: &StudyConfig,
    data: &StudyData<'_>,
    seed: u64,
) -> Result<Vec<Model<f32>>> {
    let mut out = vec![init.clone()];
    let wanted: Vec<usize> = sources
        .iter()
        .filter_map(|s| match s {
            Source::Checkpoint(e) => Some(*e),
            Source::RandomInit => None,
        })
        .collect();
    let Some(&last) = wanted.last() else {
        return Ok(out);
    };
    let schedule = TrainSchedule { base_epochs: last, effective_epochs: last, ..cfg.pretrain.clone() };
    let mut model = init.clone();
    train_with_hook(&mut model, data.train, Some(data.val), data.test, &schedule, seed, &mut |epoch, m| {
        if wanted.contains(&(epoch + 1)) {
            out.push(m.clone());
        }
        Ok(())
    })?;
    Ok(out)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Writes `matrix_seed<k>.csv` per seed, `matrix_<name>.csv` per
/// cross-seed matrix, `channels.csv` and `summary.csv`. Returns the paths.
pub fn emit_report(bundle: &StudyBundle, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, text: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for (seed, m) in &bundle.per_seed {
        write(format!("matrix_seed{seed}.csv"), m.to_csv()?)?;
    }
    for (name, m) in &bundle.cross_seed {
        write(format!("matrix_{name}.csv"), m.to_csv()?)?;
    }
    write("channels.csv".into(), channels_csv(bundle)?)?;
    write("summary.csv".into(), summary_csv(&bundle.summary)?)?;
    Ok(written)
}

fn channels_csv(bundle: &StudyBundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer_id", "label", "kept", "original"]).map_err(DataError::from)?;
    for run in &bundle.runs {
        for (j, &layer) in bundle.gated_layers.iter().enumerate() {
            w.write_record([
                layer.to_string(),
                run.feature.label.clone(),
                run.search.config.kept_counts[j].to_string(),
                bundle.original_widths[j].to_string(),
            ])
            .map_err(DataError::from)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| DataError::Record(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "mean_acc", "std_acc", "flops_ratio"]).map_err(DataError::from)?;
    for r in rows {
        w.write_record([r.label.clone(), r.mean_acc.to_string(), r.std_acc.to_string(), r.flops_ratio.to_string()])
            .map_err(DataError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| DataError::Record(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
