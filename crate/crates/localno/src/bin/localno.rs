//! Command-line front end: dataset generation, training, evaluation, and the
//! verification suites. Exit codes: 0 success, 1 failed assertion or runtime
//! error, 2 usage error (from the parser).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use localno::data::{Dataset, ParabolaSpec};
use localno::geometry::make_regular_grid;
use localno::model::{
    bind_grid, count_params, load_checkpoint, save_checkpoint, LocalNOModel, ModelConfig,
};
use localno::train::{evaluate, train_loop, TrainConfig};
use localno::verify::{self, SuiteReport};

#[derive(Parser)]
#[command(name = "localno", version, about = "Local neural operator layers: data, training, verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum GenTask {
    Darcy,
    Parabola,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    DiffConvergence,
    DiscoEquivalence,
    Equivariance,
    Gradcheck,
    Collapse,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::DiffConvergence => "diff-convergence",
            Suite::DiscoEquivalence => "disco-equivalence",
            Suite::Equivariance => "equivariance",
            Suite::Gradcheck => "gradcheck",
            Suite::Collapse => "collapse",
        }
    }

    fn run(self) -> localno::Result<SuiteReport> {
        match self {
            Suite::DiffConvergence => verify::diff_convergence(4096),
            Suite::DiscoEquivalence => verify::disco_equivalence(),
            Suite::Equivariance => verify::equivariance(),
            Suite::Gradcheck => verify::gradcheck(),
            Suite::Collapse => verify::collapse(),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (or parabola study config)
    Gen {
        #[arg(long, value_enum)]
        task: GenTask,
        /// Grid points per side
        #[arg(long, default_value_t = 64)]
        grid: usize,
        /// Samples (darcy) or channel count (parabola)
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Quadratic coefficient scale for the parabola study
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model described by a JSON config on a dataset file
    Train {
        /// JSON file: {"model": ..., "train": ..., "init_seed": ...}
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional held-out dataset for the per-epoch validation column;
        /// defaults to the training set
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report relative L2 of a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Re-evaluate at this resolution: the dataset is regenerated
        /// analytically and every branch re-binds to the new grid
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Run a verification suite, writing its CSV under --out
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(serde::Deserialize, serde::Serialize)]
struct TrainFileConfig {
    model: ModelConfig,
    train: TrainConfig,
    #[serde(default)]
    init_seed: u64,
}

/// Worker cap from LOCALNO_THREADS; the numerics are single-threaded, so the
/// cap is recorded for reproducibility and validated but never exceeded.
fn thread_cap() -> Result<usize, String> {
    match std::env::var("LOCALNO_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("LOCALNO_THREADS must be a positive integer, got {s:?}")),
        },
    }
}

fn write_run_config(out: &Path, value: &serde_json::Value) -> localno::Result<()> {
    std::fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(out.join("config.json"), text + "\n")?;
    Ok(())
}

fn metrics_csv(history: &[localno::train::EpochRecord]) -> String {
    let mut csv = String::from("epoch,lr,train_loss,val_rel_l2\n");
    for r in history {
        csv.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_rel_l2));
    }
    csv
}

fn cmd_gen(task: GenTask, grid: usize, count: usize, seed: u64, scale: f64, out: &Path, threads: usize) -> localno::Result<bool> {
    write_run_config(
        out,
        &json!({
            "command": "gen",
            "task": match task { GenTask::Darcy => "darcy", GenTask::Parabola => "parabola" },
            "grid": grid, "count": count, "seed": seed, "scale": scale,
            "threads": threads,
        }),
    )?;
    match task {
        GenTask::Darcy => {
            let g = Arc::new(make_regular_grid(&[grid, grid], &[1.0, 1.0], false)?);
            let ds = Dataset::gen_darcy_batch(&g, count, seed)?;
            ds.save(&out.join("dataset.bin"))?;
            println!("wrote {} samples at {grid}x{grid} to {}", count, out.join("dataset.bin").display());
        }
        GenTask::Parabola => {
            let spec = ParabolaSpec::sample(count, scale, seed)?;
            let text = serde_json::to_string_pretty(&spec)?;
            std::fs::write(out.join("parabola.json"), text + "\n")?;
            println!("wrote {count}-channel parabola spec (scale {scale}) to {}", out.join("parabola.json").display());
        }
    }
    Ok(true)
}

fn cmd_train(config: &Path, data: &Path, val_data: Option<&Path>, out: &Path, threads: usize) -> localno::Result<bool> {
    let file: TrainFileConfig = serde_json::from_str(&std::fs::read_to_string(config)?)?;
    let ds = Dataset::load(data)?;
    let val = match val_data {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    write_run_config(
        out,
        &json!({
            "command": "train",
            "data": data.display().to_string(),
            "val_data": val_data.map(|p| p.display().to_string()),
            "threads": threads,
            "model": file.model,
            "train": file.train,
            "init_seed": file.init_seed,
        }),
    )?;
    let grid = ds.inputs.grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(file.init_seed);
    let mut model = LocalNOModel::init(file.model.clone(), grid.dim, &mut rng)?;
    println!("model: {} parameters", count_params(&model));
    let binding = bind_grid(&model, grid)?;
    let (vx, vy) = match &val {
        Some(v) => (&v.inputs, &v.targets),
        None => (&ds.inputs, &ds.targets),
    };
    let history = train_loop(&mut model, &binding, &ds.inputs, &ds.targets, vx, vy, &file.train)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&history))?;
    save_checkpoint(&model, &out.join("checkpoint.bin"))?;
    if let Some(last) = history.last() {
        println!("epoch {}: train_loss {} val_rel_l2 {}", last.epoch, last.train_loss, last.val_rel_l2);
    }
    println!("wrote metrics.csv and checkpoint.bin to {}", out.display());
    Ok(true)
}

fn cmd_eval(checkpoint: &Path, data: &Path, resolution: Option<usize>) -> localno::Result<bool> {
    let model = load_checkpoint(checkpoint)?;
    let mut ds = Dataset::load(data)?;
    if let Some(r) = resolution {
        // cross-resolution evaluation works for analytically generated darcy
        // sets: rebuild the same seeds at the requested resolution (no
        // interpolation), then re-bind every branch to the new grid
        if ds.input_names != ["u"] || ds.target_names != ["f"] {
            return Err(localno::Error::IncompatibleDataset(
                "--resolution needs an analytically regenerable darcy dataset".into(),
            ));
        }
        let g = Arc::new(make_regular_grid(&[r, r], &[1.0, 1.0], false)?);
        ds = Dataset::gen_darcy_batch(&g, ds.len(), ds.seed)?;
    }
    let binding = bind_grid(&model, ds.inputs.grid.clone())?;
    let rel = evaluate(&model, &binding, &ds.inputs, &ds.targets, 8)?;
    let side = ds.inputs.grid.require_shape()?[0];
    println!("relative_l2 {rel} ({} samples at {side}x{side})", ds.len());
    Ok(true)
}

fn cmd_verify(suite: Suite, out: &Path, threads: usize) -> localno::Result<bool> {
    write_run_config(
        out,
        &json!({ "command": "verify", "suite": suite.name(), "threads": threads }),
    )?;
    let report = suite.run()?;
    std::fs::write(out.join(format!("verify_{}.csv", suite.name())), &report.csv)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !report.all_pass() {
        let failed = report.checks.iter().filter(|c| !c.pass).count();
        eprintln!("{failed} of {} checks failed", report.checks.len());
    }
    Ok(report.all_pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match thread_cap() {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.cmd {
        Cmd::Gen { task, grid, count, seed, scale, out } => {
            cmd_gen(*task, *grid, *count, *seed, *scale, out, threads)
        }
        Cmd::Train { config, data, val_data, out } => {
            cmd_train(config, data, val_data.as_deref(), out, threads)
        }
        Cmd::Eval { checkpoint, data, resolution } => cmd_eval(checkpoint, data, *resolution),
        Cmd::Verify { suite, out } => cmd_verify(*suite, out, threads),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
