use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dro_core::harness::{
    bench_sampler_overhead, emit_summary, generate_dataset, run_experiment, ExperimentConfig,
};
use dro_core::sampler::staleness_histogram;
use dro_core::trainer::{
    evaluate_robust, load_checkpoint, save_checkpoint, write_metrics_csv, Objective, Trainer,
};
use dro_core::{DroError, Result};

#[derive(Parser)]
#[command(
    name = "hwdro",
    version,
    about = "Distributionally robust training with hardness weighted sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model (ERM or DRO) on the configured synthetic dataset.
    Train(Overrides),
    /// Run the ERM vs. DRO comparison and write curves plus a summary.
    Experiment(Overrides),
    /// Time the sampler (softmax + draw + store update) for several sizes.
    Bench {
        /// Comma-separated store sizes.
        #[arg(long, value_delimiter = ',', default_values_t = vec![268usize, 10_000, 100_000])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the contents of a checkpoint.
    InspectCheckpoint { checkpoint: PathBuf },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Flat key-value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// erm or dro (train only).
    #[arg(long)]
    objective: Option<String>,
    /// Robustness parameter; for `experiment` this replaces the β grid.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    nesterov: Option<bool>,
    #[arg(long)]
    importance_sampling: Option<bool>,
    #[arg(long)]
    w_min: Option<f64>,
    #[arg(long)]
    w_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed; for `experiment` this replaces the seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self, experiment: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            match value {
                Some(v) => cfg.set(key, &v),
                None => Ok(()),
            }
        };
        set("train.objective", self.objective.clone())?;
        if experiment {
            set("experiment.betas", self.beta.map(|b| b.to_string()))?;
            set("experiment.seeds", self.seed.map(|s| s.to_string()))?;
        } else {
            set("train.beta", self.beta.map(|b| b.to_string()))?;
            set("train.seed", self.seed.map(|s| s.to_string()))?;
        }
        set("train.lr", self.lr.map(|v| v.to_string()))?;
        set("train.batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("train.momentum", self.momentum.map(|v| v.to_string()))?;
        set("train.nesterov", self.nesterov.map(|v| v.to_string()))?;
        set(
            "train.importance_sampling",
            self.importance_sampling.map(|v| v.to_string()),
        )?;
        set("train.w_min", self.w_min.map(|v| v.to_string()))?;
        set("train.w_max", self.w_max.map(|v| v.to_string()))?;
        set("train.epochs", self.epochs.map(|v| v.to_string()))?;
        set(
            "experiment.out_dir",
            self.out_dir.as_ref().map(|p| p.display().to_string()),
        )?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| DroError::Numeric(format!("serialisation: {e}")))?;
    println!("{text}");
    Ok(())
}

fn cmd_train(o: &Overrides) -> Result<()> {
    let cfg = o.resolve(false)?;
    let (train_set, test_set) = generate_dataset(&cfg.dataset)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let tc = cfg.train.clone();
    let mut trainer = Trainer::with_monitor(tc.clone(), &train_set, &test_set)?;
    let records = trainer.run()?;
    let state = trainer.into_state();

    let csv = cfg.out_dir.join("metrics.csv");
    write_metrics_csv(
        BufWriter::new(File::create(&csv)?),
        &records,
        test_set.num_classes,
    )?;
    let ckpt = cfg.out_dir.join("checkpoint.drock");
    save_checkpoint(&state, &ckpt)?;
    fs::write(cfg.out_dir.join("config.kv"), cfg.to_kv_string())?;

    let beta = (tc.objective == Objective::Dro).then_some(tc.beta);
    let mut test = evaluate_robust(&state.model, &test_set, tc.loss_kind, beta)?;
    test.step = state.step;
    eprintln!(
        "trained {} steps; curves in {}, checkpoint in {}",
        state.step,
        csv.display(),
        ckpt.display()
    );
    print_json(&test)
}

fn cmd_experiment(o: &Overrides) -> Result<()> {
    let cfg = o.resolve(true)?;
    let result = run_experiment(&cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("summary.json");
    emit_summary(&result, &path)?;
    fs::write(cfg.out_dir.join("config.kv"), cfg.to_kv_string())?;
    for (name, arm) in &result.arms {
        let failed = arm
            .runs
            .iter()
            .filter(|r| matches!(r.outcome, dro_core::harness::RunOutcome::Failed { .. }))
            .count();
        match arm.median_worst_class_test_accuracy {
            Some(m) => {
                println!("{name:>16}  median worst-class test accuracy {m:.4}  ({failed} failed)")
            }
            None => println!("{name:>16}  all runs failed"),
        }
    }
    eprintln!("summary written to {}", path.display());
    Ok(())
}

fn cmd_bench(ns: &[usize], reps: usize, seed: u64) -> Result<()> {
    println!(
        "{:>10} {:>14} {:>12} {:>12}",
        "n", "us/iter", "loss bytes", "store bytes"
    );
    for row in bench_sampler_overhead(ns, reps, seed)? {
        println!(
            "{:>10} {:>14.3} {:>12} {:>12}",
            row.n, row.mean_us_per_iter, row.loss_bytes, row.store_bytes
        );
    }
    Ok(())
}

fn cmd_eval(path: &Path, o: &Overrides) -> Result<()> {
    let cfg = o.resolve(false)?;
    let state = load_checkpoint(path)?;
    let (train_set, test_set) = generate_dataset(&cfg.dataset)?;
    let beta = (cfg.train.objective == Objective::Dro).then_some(cfg.train.beta);
    let mut train = evaluate_robust(&state.model, &train_set, cfg.train.loss_kind, beta)?;
    let mut test = evaluate_robust(&state.model, &test_set, cfg.train.loss_kind, beta)?;
    train.step = state.step;
    test.step = state.step;
    print_json(&serde_json::json!({ "train": train, "test": test }))
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let state = load_checkpoint(path)?;
    let store = &state.store;
    let losses = store.losses();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("layer dims       {:?}", state.model.layer_dims());
    println!("parameters       {}", state.model.param_count());
    println!("train step       {}", state.step);
    println!("store examples   {}", store.len());
    println!("store step       {}", store.step());
    println!("stale loss mean  {mean}");
    println!("stale loss max   {max}");
    let vnorm = state.velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("velocity norm    {vnorm}");
    println!("staleness histogram:");
    for (lag, count) in staleness_histogram(store) {
        println!("  {lag:?}: {count}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match &cli.command {
        Command::Train(o) => cmd_train(o),
        Command::Experiment(o) => cmd_experiment(o),
        Command::Bench { n, reps, seed } => cmd_bench(n, *reps, *seed),
        Command::Eval {
            checkpoint,
            overrides,
        } => cmd_eval(checkpoint, overrides),
        Command::InspectCheckpoint { checkpoint } => cmd_inspect(checkpoint),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
