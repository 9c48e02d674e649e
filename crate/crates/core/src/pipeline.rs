//! End-to-end runs: prune, study, baseline training and record inspection.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::{emit_report, run_pretrain_effect_study, AnalysisError, StudyBundle, StudyConfig, StudyData};
use crate::arch::{count_flops, place_gates, ArchSpec, ChannelConfig};
use crate::config::{ConfigError, DatasetSource, PipelineConfig};
use crate::data::archive::save_checkpoint;
use crate::data::record::{save_run, RunBuilder, RunRecord};
use crate::data::{cifar, make_validation_split, synth_splits, DataError, Dataset};
use crate::gates::{learn_channel_importance, select_best_gates};
use crate::model::Model;
use crate::search::{search_structure, SearchConfig, SearchResult};
use crate::train::{train_from_scratch, train_with_hook, TrainSchedule};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String, record: Option<PathBuf> },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Train, validation and test splits of the configured dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let (train, test) = match &cfg.dataset {
        DatasetSource::Synth => synth_splits(&cfg.synth, cfg.data_seed)?,
        DatasetSource::Cifar10(dir) => cifar::load_cifar10(dir)?,
    };
    let (train, val) = make_validation_split(&train, cfg.val_per_class(), cfg.data_seed)?;
    Ok(Splits { train, val, test })
}

fn arch_for(cfg: &PipelineConfig, splits: &Splits) -> Result<ArchSpec> {
    Ok(cfg.expanded_arch(splits.train.sample_shape(), splits.train.class_count())?)
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub record: RunRecord,
    pub dir: PathBuf,
    pub summary: String,
}

impl PruneOutcome {
    pub fn search(&self) -> &SearchResult {
        self.record.search().expect("completed runs carry a search result")
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.search().config
    }

    pub fn test_accuracy(&self) -> f64 {
        self.record.train_reports()[0].test_accuracy
    }
}

/// Directory of the prune run for `seed`.
pub fn prune_dir(cfg: &PipelineConfig, seed: u64) -> PathBuf {
    cfg.out.join(format!("prune-seed{seed}"))
}

/// Runs the pipeline once per configured seed.
pub fn cmd_prune(cfg: &PipelineConfig) -> Result<Vec<PruneOutcome>> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    cfg.seeds.iter().map(|&seed| run_prune(cfg, &splits, seed)).collect()
}

/// Expand, initialize, learn gates on the frozen init, select a snapshot,
/// search a structure at the budget and train it from scratch. A failing
/// stage still leaves a sealed record carrying the failure.
pub fn run_prune(cfg: &PipelineConfig, splits: &Splits, seed: u64) -> Result<PruneOutcome> {
    let dir = prune_dir(cfg, seed);
    let mut rec = RunBuilder::new(cfg.to_json(), vec![seed]);
    match prune_stages(cfg, splits, seed, &mut rec) {
        Ok(summary) => {
            let record = rec.seal()?;
            save_run(&record, &dir)?;
            Ok(PruneOutcome { record, dir, summary })
        }
        Err((stage, message)) => {
            rec.fail(stage, message.clone());
            let saved = rec.seal().and_then(|r| save_run(&r, &dir)).is_ok();
            Err(PipelineError::Stage { stage, message, record: saved.then_some(dir) })
        }
    }
}

type StageResult<T> = std::result::Result<T, (&'static str, String)>;

fn stage<T, E: std::fmt::Display>(name: &'static str, r: std::result::Result<T, E>) -> StageResult<T> {
    r.map_err(|e| (name, e.to_string()))
}

fn prune_stages(cfg: &PipelineConfig, splits: &Splits, seed: u64, rec: &mut RunBuilder) -> StageResult<String> {
    let arch = stage("expand", arch_for(cfg, splits))?;
    rec.arch = Some(arch.clone());
    let full_flops = stage("expand", count_flops(&arch, None))?;
    let init = stage("init", Model::<f32>::full(&arch, seed))?;

    let importance = cfg.importance();
    let mut gated = init.clone();
    let snapshots = stage(
        "gates",
        learn_channel_importance(&mut gated, &splits.train, &splits.val, &importance, seed),
    )?;
    let best = stage("select", select_best_gates(&snapshots, importance.target_sparsity))?.clone();
    rec.selected_snapshot = snapshots.iter().position(|s| *s == best);
    rec.gate_trajectory = snapshots;

    let search = if cfg.budget >= 1.0 {
        full_structure(&arch, full_flops)
    } else {
        let budget = (cfg.budget * full_flops as f64).round() as u64;
        let search_cfg = SearchConfig {
            max_iters: cfg.search.max_iters,
            rel_tolerance: cfg.search.tolerance,
            ..SearchConfig::new(budget)
        };
        stage("search", search_structure(&best.gates, &arch, &search_cfg))?
    };
    rec.search = Some(search.clone());
    if cfg.search.require_convergence && !search.converged {
        return Err(("search", search.diagnostics.clone().unwrap_or_else(|| "did not converge".into())));
    }

    let mut model = if cfg.lottery_init {
        stage("train", init.lottery_slice(&search.config))?
    } else {
        stage("train", Model::generate(&arch, &search.config, seed))?
    };
    let schedule = if cfg.budget_training {
        stage("train", cfg.train.clone().with_budget(full_flops, search.achieved_flops))?
    } else {
        cfg.train.clone()
    };
    let report = stage(
        "train",
        train_from_scratch(&mut model, &splits.train, Some(&splits.val), &splits.test, &schedule, seed),
    )?;
    let ratio = search.achieved_flops as f64 / full_flops as f64;
    let summary = format!(
        "seed {seed}: flops ratio {ratio:.4} ({}, tau* = {:.6}, kept {:?}), {} epochs, test accuracy {:.4}",
        if search.converged { "converged" } else { "not converged" },
        search.tau_star,
        search.config.kept_counts,
        schedule.effective_epochs,
        report.test_accuracy
    );
    rec.train_reports.push(report);
    rec.tensors = model.named_tensors(true).into_iter().map(|(n, t)| (format!("weights/{n}"), t)).collect();
    Ok(summary)
}

fn full_structure(arch: &ArchSpec, full_flops: u64) -> SearchResult {
    let placement = place_gates(arch).expect("validated architecture");
    SearchResult {
        tau_star: 0.0,
        config: ChannelConfig::full(arch, &placement),
        achieved_flops: full_flops,
        iterations: 0,
        converged: true,
        trace: Vec::new(),
        diagnostics: Some("budget equals the full model; nothing to prune".into()),
    }
}

/// Study configuration derived from the pipeline config.
pub fn study_config(cfg: &PipelineConfig, arch: ArchSpec) -> StudyConfig {
    StudyConfig {
        arch,
        checkpoint_epochs: cfg.checkpoint_epochs.clone(),
        seeds: cfg.seeds.clone(),
        budget_ratio: cfg.budget,
        importance: cfg.importance(),
        max_iters: cfg.search.max_iters,
        tolerance: cfg.search.tolerance,
        pretrain: cfg.train.clone(),
        scratch: cfg.train.clone(),
        budget_training: cfg.budget_training,
        lottery_init: cfg.lottery_init,
    }
}

pub fn study_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.out.join("study")
}

/// Runs the pre-training study and writes its report. Returns the bundle
/// and the files written.
pub fn cmd_study(cfg: &PipelineConfig) -> Result<(StudyBundle, Vec<PathBuf>)> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let arch = arch_for(cfg, &splits)?;
    let data = StudyData { train: &splits.train, val: &splits.val, test: &splits.test };
    let bundle = run_pretrain_effect_study(&study_config(cfg, arch), &data)?;
    let dir = study_dir(cfg);
    let mut files = emit_report(&bundle, &dir)?;
    let json = dir.join("bundle.json");
    let text = serde_json::to_string_pretty(&bundle).map_err(DataError::from)?;
    std::fs::write(&json, text).map_err(|e| DataError::io(&json, e))?;
    files.push(json);
    Ok((bundle, files))
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub record: RunRecord,
    pub dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains the full expanded model per seed, saving checkpoints after each
/// epoch listed in `checkpoint_epochs`.
pub fn cmd_train_baseline(cfg: &PipelineConfig) -> Result<Vec<BaselineOutcome>> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let arch = arch_for(cfg, &splits)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.out.join(format!("baseline-seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        let mut rec = RunBuilder::new(cfg.to_json(), vec![seed]);
        rec.arch = Some(arch.clone());
        let mut model = Model::<f32>::full(&arch, seed).map_err(|e| stage_err("init", e))?;
        let epochs = cfg.checkpoint_epochs.iter().copied().max().unwrap_or(0).max(cfg.train.base_epochs);
        let schedule = TrainSchedule { base_epochs: epochs, effective_epochs: epochs, ..cfg.train.clone() };
        let mut checkpoints = Vec::new();
        let mut save = |epoch: usize, m: &Model<f32>| {
            if cfg.checkpoint_epochs.contains(&(epoch + 1)) {
                let path = dir.join(format!("checkpoint-e{}.json", epoch + 1));
                save_checkpoint(m, &path)?;
                checkpoints.push(path);
            }
            Ok(())
        };
        let report = train_with_hook(&mut model, &splits.train, Some(&splits.val), &splits.test, &schedule, seed, &mut save)
            .map_err(|e| stage_err("train", e))?;
        rec.train_reports.push(report);
        rec.referenced_files = checkpoints.iter().flat_map(|p| [p.clone(), p.with_extension("bin")]).collect();
        let record = rec.seal()?;
        save_run(&record, &dir)?;
        out.push(BaselineOutcome { record, dir, checkpoints });
    }
    Ok(out)
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, message: e.to_string(), record: None }
}

/// CSV views of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct InspectViews {
    /// `layer_id,layer,kept,original`, one row per gated layer.
    pub kept_csv: String,
    /// `epoch,step,sparsity,val_accuracy,train_loss`.
    pub trajectory_csv: String,
    /// `epoch,lr,train_loss,val_acc` of the first training report.
    pub metrics_csv: String,
}

pub fn inspect_record(record: &RunRecord) -> Result<InspectViews> {
    let mut kept = csv::Writer::from_writer(Vec::new());
    kept.write_record(["layer_id", "layer", "kept", "original"]).map_err(DataError::from)?;
    if let (Some(arch), Some(search)) = (record.arch(), record.search()) {
        let placement = place_gates(arch).map_err(|e| DataError::Record(e.to_string()))?;
        for ((site, width), k) in placement.sites.iter().zip(placement.widths(arch)).zip(&search.config.kept_counts) {
            kept.write_record([
                site.layer.to_string(),
                arch.layers[site.layer].name.clone(),
                k.to_string(),
                width.to_string(),
            ])
            .map_err(DataError::from)?;
        }
    }
    let mut traj = csv::Writer::from_writer(Vec::new());
    traj.write_record(["epoch", "step", "sparsity", "val_accuracy", "train_loss"]).map_err(DataError::from)?;
    for s in record.gate_trajectory() {
        traj.write_record([
            s.epoch.to_string(),
            s.gates.step.to_string(),
            s.sparsity.to_string(),
            s.val_accuracy.to_string(),
            s.train_loss.to_string(),
        ])
        .map_err(DataError::from)?;
    }
    let metrics_csv = match record.train_reports().first() {
        Some(r) => r.metrics_csv()?,
        None => "epoch,lr,train_loss,val_acc\n".into(),
    };
    let text = |w: csv::Writer<Vec<u8>>| -> Result<String> {
        let bytes = w.into_inner().map_err(|e| DataError::Record(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    };
    Ok(InspectViews { kept_csv: text(kept)?, trajectory_csv: text(traj)?, metrics_csv })
}

/// Writes the inspect views into `dir`.
pub fn write_inspect_views(views: &InspectViews, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let files = [
        ("kept.csv", &views.kept_csv),
        ("trajectory.csv", &views.trajectory_csv),
        ("metrics.csv", &views.metrics_csv),
    ];
    files
        .into_iter()
        .map(|(name, text)| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
