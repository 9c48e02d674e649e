use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scratchprune::config::{DatasetSource, PipelineConfig};
use scratchprune::data::record::load_run;
use scratchprune::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "scratchprune", version, about = "Learn pruned channel structures from random weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn gates on a random init, search a structure at the budget and train it.
    Prune(RunArgs),
    /// Compare structures learned from random weights and from checkpoints.
    Study(RunArgs),
    /// Train the full model, saving checkpoints.
    TrainBaseline(RunArgs),
    /// Print the views of a saved run.
    Inspect {
        /// Run directory written by `prune` or `train-baseline`.
        record: PathBuf,
        /// Also write kept.csv, trajectory.csv and metrics.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    expand: Option<f64>,
    /// Target FLOPS as a fraction of the full model.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sparsity_r: Option<f64>,
    /// Base training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    gate_epochs: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `synth` or `cifar10:<dir>`.
    #[arg(long)]
    dataset: Option<DatasetSource>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lottery_init: bool,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    checkpoint_epochs: Option<Vec<usize>>,
    /// Fail when the structure search does not converge.
    #[arg(long)]
    require_convergence: bool,
}

impl RunArgs {
    fn resolve(self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.arch {
            cfg.arch = v;
            cfg.arch_file = None;
        }
        if let Some(v) = self.expand {
            cfg.expand = v;
        }
        if let Some(v) = self.budget {
            cfg.budget = v;
        }
        if let Some(v) = self.gamma {
            cfg.gates.gamma = v;
        }
        if let Some(v) = self.sparsity_r {
            cfg.sparsity_r = Some(v);
        }
        if let Some(v) = self.epochs {
            cfg.train.base_epochs = v;
            cfg.train.effective_epochs = v;
        }
        if let Some(v) = self.gate_epochs {
            cfg.gates.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seeds = vec![v];
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.dataset {
            cfg.dataset = v;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if let Some(v) = self.tolerance {
            cfg.search.tolerance = v;
        }
        if let Some(v) = self.max_iters {
            cfg.search.max_iters = v;
        }
        if let Some(v) = self.checkpoint_epochs {
            cfg.checkpoint_epochs = v;
        }
        cfg.lottery_init |= self.lottery_init;
        cfg.search.require_convergence |= self.require_convergence;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prune(args) => {
            let cfg = args.resolve()?;
            for outcome in pipeline::cmd_prune(&cfg).map_err(describe)? {
                println!("{}", outcome.summary);
                println!("record: {}", outcome.dir.display());
            }
        }
        Command::Study(args) => {
            let cfg = args.resolve()?;
            let (bundle, files) = pipeline::cmd_study(&cfg)?;
            println!("label,mean_acc,std_acc,flops_ratio");
            for row in &bundle.summary {
                println!("{},{:.4},{:.4},{:.4}", row.label, row.mean_acc, row.std_acc, row.flops_ratio);
            }
            for (name, m) in &bundle.cross_seed {
                println!("mean cross-seed correlation [{name}]: {:.4}", m.mean_off_diagonal());
            }
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::TrainBaseline(args) => {
            let cfg = args.resolve()?;
            for outcome in pipeline::cmd_train_baseline(&cfg)? {
                let report = &outcome.record.train_reports()[0];
                println!("seed {}: test accuracy {:.4}", report.seed, report.test_accuracy);
                for c in &outcome.checkpoints {
                    println!("checkpoint: {}", c.display());
                }
                println!("record: {}", outcome.dir.display());
            }
        }
        Command::Inspect { record, out } => {
            let rec = load_run(&record).with_context(|| format!("reading {}", record.display()))?;
            let views = pipeline::inspect_record(&rec)?;
            println!("# kept channels\n{}", views.kept_csv);
            println!("# gate trajectory\n{}", views.trajectory_csv);
            println!("# training\n{}", views.metrics_csv);
            if let Some(dir) = out {
                for f in pipeline::write_inspect_views(&views, &dir)? {
                    println!("wrote {}", f.display());
                }
            }
            if let Some(f) = rec.failure() {
                bail!("run failed in stage {}: {}", f.stage, f.message);
            }
        }
    }
    Ok(())
}

fn describe(e: PipelineError) -> anyhow::Error {
    let saved = match &e {
        PipelineError::Stage { record: Some(dir), .. } => Some(dir.clone()),
        _ => None,
    };
    match saved {
        Some(dir) => anyhow::Error::new(e).context(format!("partial record saved in {}", dir.display())),
        None => e.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
