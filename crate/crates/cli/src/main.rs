//! `lab` — train, attack and diagnose annulus-headed classifiers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srcm_lab::checkpoint;
use srcm_lab::config::{parse_config, ExperimentConfig};
use srcm_lab::diagnostics::latency_compare;
use srcm_lab::experiment::{attack_saved, load_dataset, run_experiment, run_sweep};
use srcm_lab::nn::{Mode, Model};
use srcm_lab::report::{emit_report, emit_sweep, results_row, RESULTS_HEADER};
use srcm_lab::srcm::{HeadDesign, SrcmConfig};
use srcm_lab::{LabError, Matrix, Result};

#[derive(Parser)]
#[command(name = "lab", version, about = "Membership-inference experiments on annulus-projected heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (default: $LAB_OUT_DIR, else ./lab-out).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train target and shadow, attack, and write the report.
    Run(Common),
    /// Run every (r1, d) point of the configured grid.
    Sweep(Common),
    /// Attack a saved target checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed the checkpoint was trained with (default: the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Forward latency of the configured model with a vanilla and an srcm head.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Magnitude × margin tables only.
    Diagnose(Common),
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("LAB_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("lab-out"))
}

fn run(common: &Common) -> Result<()> {
    let cfg = load_config(&common.config)?;
    let dir = out_dir(common);
    let outcome = run_experiment(&cfg)?;
    emit_report(&outcome, &dir)?;
    for t in &outcome.targets {
        checkpoint::save(&t.model, dir.join(format!("target_seed{}.ckpt", t.seed)))?;
    }
    println!("{RESULTS_HEADER}");
    for s in &outcome.report.seeds {
        println!("{}", results_row(&s.summary));
    }
    eprintln!("report written to {}", dir.display());
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let cfg = load_config(&common.config)?;
    let dir = out_dir(common);
    let outcome = run_sweep(&cfg)?;
    emit_sweep(&outcome, &dir)?;
    println!("r1,d,{RESULTS_HEADER}");
    for p in &outcome.report.points {
        println!("{},{},{}", p.r1, p.d, results_row(&p.report.mean));
    }
    let t = &outcome.report.trend;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    eprintln!(
        "spearman vs r1: train_acc {} test_acc {} auc_mentropy {}",
        show(t.r1_train_acc),
        show(t.r1_test_acc),
        show(t.r1_auc.mentropy)
    );
    Ok(())
}

fn attack(common: &Common, path: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&common.config)?;
    let seed = seed.unwrap_or(cfg.run.seed);
    let dataset = load_dataset(&cfg.dataset)?;
    let spec = cfg.model_spec(dataset.dim(), dataset.num_classes);
    let model = checkpoint::load(path, &spec, seed)?;
    let (result, _) = attack_saved(&cfg, &dataset, model, seed)?;
    println!("{RESULTS_HEADER}");
    println!("{}", results_row(&result.summary));
    Ok(())
}

fn bench(common: &Common, batch: usize, iters: usize, warmup: usize) -> Result<()> {
    let cfg = load_config(&common.config)?;
    let (width, classes) = match &cfg.dataset {
        srcm_lab::config::DatasetSpec::Purchase { features, classes, .. } => (*features, *classes),
        srcm_lab::config::DatasetSpec::Synthetic { dim, classes, .. } => (*dim, *classes),
    };
    let mut spec = cfg.model_spec(width, classes);
    let x = Matrix::from_vec(
        batch,
        width,
        (0..batch * width).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect(),
    )?;
    let mut models = Vec::new();
    for head in [HeadDesign::Vanilla, HeadDesign::Srcm] {
        spec.head = head;
        spec.srcm = match head {
            HeadDesign::Vanilla => None,
            _ => Some(cfg.srcm.unwrap_or(SrcmConfig::new(1.0, 1.0, *spec.hidden.last().unwrap_or(&1))?)),
        };
        let mut model = Model::build(&spec, cfg.run.seed)?;
        model.set_mode(Mode::Eval);
        models.push(model);
    }
    let (v, s) = latency_compare(&models[0], &models[1], &x, iters, warmup)?;
    println!("head,mean_ms,std_ms");
    println!("vanilla,{:.4},{:.4}", v.mean_ms, v.std_ms);
    println!("srcm,{:.4},{:.4}", s.mean_ms, s.std_ms);
    eprintln!("srcm / vanilla latency ratio: {:.3}", s.mean_ms / v.mean_ms);
    Ok(())
}

fn diagnose(common: &Common) -> Result<()> {
    let cfg = load_config(&common.config)?;
    let dir = out_dir(common).join("diagnostics");
    let outcome = run_experiment(&cfg)?;
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    println!("table,pearson_members,pearson_nonmembers");
    for (stem, tables) in &outcome.tables {
        for (suffix, t) in [("members", &tables.members), ("nonmembers", &tables.nonmembers)] {
            let path = dir.join(format!("{stem}_{suffix}.csv"));
            fs::write(&path, t.to_csv()).map_err(|e| LabError::io(&path, e))?;
        }
        let show = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
        println!(
            "{stem},{},{}",
            show(tables.members.pearson),
            show(tables.nonmembers.pearson)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c),
        Command::Sweep(c) => sweep(c),
        Command::Attack {
            common,
            checkpoint,
            seed,
        } => attack(common, checkpoint, *seed),
        Command::Bench {
            common,
            batch,
            iters,
            warmup,
        } => bench(common, *batch, *iters, *warmup),
        Command::Diagnose(c) => diagnose(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
