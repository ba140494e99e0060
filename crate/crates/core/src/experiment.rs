//! End-to-end pipeline: split → train target → train shadow → attack →
//! diagnose, plus repeated runs and `(r1, d)` sweeps.

use serde::{Deserialize, Serialize};

use crate::access::{AccessLog, DatasetView, Stage};
use crate::attacks::{
    make_split, run_attack_suite, AttackKind, AttackOptions, MembershipSplit, PerAttack, TrainedModel,
};
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::datasets::{dataset_digest, generate_synthetic, load_binary_csv, TabularDataset};
use crate::defenses::DefenseConfig;
use crate::diagnostics::{magnitude_margin_table, spearman, DiagnosticTables, PredictionRecord};
use crate::error::{LabError, Result};
use crate::nn::{train_epochs, MagnitudeSource, Mode, Model, OptimizerState};
use crate::srcm::{capacity_proxy, HeadDesign};

/// Fraction of the member set held out as the early-stopping monitor.
pub const MONITOR_FRACTION: f64 = 0.1;

/// Attack used for the per-sample correctness in the diagnostic tables.
pub const DIAGNOSTIC_ATTACK: AttackKind = AttackKind::MEntropy;

/// How the report's less obvious quantities were computed.
pub const METHOD_NOTES: [&str; 5] = [
    "gradx: negated l2 norm of the cross-entropy gradient with respect to the input",
    "metric attacks: threshold-free AUC over raw scores; correctness flags use the shadow median",
    "shadow model: same recipe as the target, trained on the disjoint shadow half with seed + 1",
    "diagnostics: mentropy correctness per sample; pooled table over all seeds",
    "early stopping: 10% of the members are held out as monitor and excluded from the attack",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub train_acc: f64,
    pub test_acc: f64,
    pub auc: PerAttack<f64>,
}

impl Summary {
    pub fn mean(items: &[Summary]) -> Summary {
        let n = items.len().max(1) as f64;
        let avg = |f: &dyn Fn(&Summary) -> f64| items.iter().map(f).sum::<f64>() / n;
        Summary {
            train_acc: avg(&|s| s.train_acc),
            test_acc: avg(&|s| s.test_acc),
            auc: PerAttack::from_fn(|k| avg(&|s| *s.auc.get(k))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub summary: Summary,
    pub thresholds: PerAttack<f64>,
    pub epochs_trained: usize,
    pub stopped_early: bool,
    pub members: usize,
    pub nonmembers: usize,
    pub pearson_members: Option<f64>,
    pub pearson_nonmembers: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Resolved configuration in the input format.
    pub config: String,
    pub dataset_digest: String,
    pub dataset_size: usize,
    pub head: HeadDesign,
    /// Capacity proxy of the annulus in the ring's dimension; ring heads only.
    pub capacity_proxy: Option<f64>,
    pub magnitude_source: MagnitudeSource,
    pub diagnostic_attack: AttackKind,
    pub notes: Vec<String>,
    pub seeds: Vec<SeedResult>,
    pub mean: Summary,
    /// Diagnostic CSV files, relative to the report directory.
    pub diagnostics: Vec<String>,
}

/// A report plus the artifacts that are written next to it.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    /// `(file stem, tables)` per seed, then the pooled tables.
    pub tables: Vec<(String, DiagnosticTables)>,
    pub targets: Vec<TrainedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub r1: f64,
    pub d: f64,
    pub report: ExperimentReport,
}

/// Spearman correlation of each mean metric with `r1` and `d` across the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub r1_train_acc: Option<f64>,
    pub r1_test_acc: Option<f64>,
    pub r1_auc: PerAttack<Option<f64>>,
    pub d_train_acc: Option<f64>,
    pub d_test_acc: Option<f64>,
    pub d_auc: PerAttack<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub trend: Trend,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: SweepReport,
    pub outcomes: Vec<ExperimentOutcome>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        already @ LabError::Stage { .. } => already,
        other => LabError::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<TabularDataset> {
    match spec {
        DatasetSpec::Purchase {
            path,
            features,
            classes,
        } => load_binary_csv(path, *features, *classes),
        DatasetSpec::Synthetic {
            n,
            dim,
            classes,
            flip_prob,
            seed,
        } => generate_synthetic(*n, *dim, *classes, *flip_prob, *seed),
    }
}

/// Splits off the trailing monitor fraction of `members` when the defense
/// needs one. Returns `(trained members, monitor)`.
fn carve_monitor(members: &[usize], defense: &DefenseConfig) -> (Vec<usize>, Vec<usize>) {
    if !matches!(defense, DefenseConfig::EarlyStopping { .. }) {
        return (members.to_vec(), Vec::new());
    }
    let k = ((members.len() as f64 * MONITOR_FRACTION).round() as usize).clamp(1, members.len() - 1);
    let cut = members.len() - k;
    (members[..cut].to_vec(), members[cut..].to_vec())
}

fn train_model(
    cfg: &ExperimentConfig,
    data: DatasetView<'_>,
    members: &[usize],
    monitor: &[usize],
    stage_tag: Stage,
    seed: u64,
) -> Result<(TrainedModel, usize, bool)> {
    let recipe = cfg.recipe(data.dataset.dim(), data.num_classes());
    let mut model = Model::build(&recipe.model, seed)?;
    let train = data.gather(members, stage_tag);
    let monitor = (!monitor.is_empty()).then(|| data.gather(monitor, stage_tag));
    let mut opt = OptimizerState::new(&model, &recipe.optimizer)?;
    let log = train_epochs(
        &mut model,
        &train,
        monitor.as_ref(),
        &mut opt,
        &recipe.train,
        &recipe.defense,
        seed,
    )?;
    model.set_mode(Mode::Eval);
    Ok((
        TrainedModel {
            model,
            recipe,
            seed,
        },
        log.epochs.len(),
        log.stopped_early,
    ))
}

struct SeedRun {
    result: SeedResult,
    tables: DiagnosticTables,
    records: Vec<PredictionRecord>,
    target: TrainedModel,
}

/// Trains the shadow and attacks `target`, which must come from the target
/// half of `split`.
fn attack_and_diagnose(
    cfg: &ExperimentConfig,
    view: DatasetView<'_>,
    split: &MembershipSplit,
    target: TrainedModel,
    seed: u64,
) -> Result<(crate::attacks::AttackReport, DiagnosticTables, TrainedModel, MembershipSplit)> {
    let (shadow_members, shadow_monitor) = carve_monitor(&split.shadow_train, &cfg.defense);
    let (shadow, _, _) = stage(
        "shadow_training",
        train_model(cfg, view, &shadow_members, &shadow_monitor, Stage::ShadowTraining, seed + 1),
    )?;
    let (target_members, _) = carve_monitor(&split.target_train, &cfg.defense);
    let attack_split = MembershipSplit {
        target_train: target_members,
        shadow_train: shadow_members,
        ..split.clone()
    };
    let opts = AttackOptions {
        attacker: cfg.attacker(),
        standardize: cfg.run.standardize,
        seed,
    };
    let report = stage(
        "attack",
        run_attack_suite(&target, &shadow, &attack_split, view, &opts),
    )?;
    let tables = stage(
        "diagnostics",
        magnitude_margin_table(
            &report.records,
            cfg.run.bins,
            cfg.run.bins,
            DIAGNOSTIC_ATTACK,
            target.model.magnitude_source(),
        ),
    )?;
    Ok((report, tables, target, attack_split))
}

fn run_seed(cfg: &ExperimentConfig, view: DatasetView<'_>, seed: u64) -> Result<SeedRun> {
    let split = stage("split", make_split(view.dataset.len(), seed))?;
    let (members, monitor) = carve_monitor(&split.target_train, &cfg.defense);
    let (target, epochs_trained, stopped_early) = stage(
        "target_training",
        train_model(cfg, view, &members, &monitor, Stage::TargetTraining, seed),
    )?;
    let (report, tables, target, attack_split) = attack_and_diagnose(cfg, view, &split, target, seed)?;
    let result = SeedResult {
        seed,
        summary: Summary {
            train_acc: report.train_acc,
            test_acc: report.test_acc,
            auc: report.auc,
        },
        thresholds: report.thresholds,
        epochs_trained,
        stopped_early,
        members: attack_split.target_train.len(),
        nonmembers: attack_split.target_test.len(),
        pearson_members: tables.members.pearson,
        pearson_nonmembers: tables.nonmembers.pearson,
    };
    Ok(SeedRun {
        result,
        tables,
        records: report.records,
        target,
    })
}

fn ring_capacity(cfg: &ExperimentConfig, num_classes: usize) -> Result<Option<f64>> {
    let Some(s) = cfg.srcm else {
        return Ok(None);
    };
    let dim = match cfg.model.head {
        HeadDesign::DesignA => num_classes,
        _ => s.hidden_width,
    };
    // huge dimensions overflow; the report then carries no value
    Ok(capacity_proxy(dim, s.r1, s.d).ok())
}

/// Runs the configured seeds on an already loaded dataset, optionally
/// tracing every row access into `log`.
pub fn run_on_dataset(
    cfg: &ExperimentConfig,
    dataset: &TabularDataset,
    log: Option<&AccessLog>,
) -> Result<ExperimentOutcome> {
    stage("config", cfg.validate())?;
    let view = match log {
        Some(l) => DatasetView::traced(dataset, l),
        None => DatasetView::new(dataset),
    };
    let mut seeds = Vec::new();
    let mut tables = Vec::new();
    let mut pooled = Vec::new();
    let mut targets = Vec::new();
    let mut source = MagnitudeSource::PreProjection;
    for i in 0..cfg.run.repeat as u64 {
        let seed = cfg.run.seed + i;
        log::info!("seed {seed}: training target and shadow");
        let run = run_seed(cfg, view, seed)?;
        source = run.target.model.magnitude_source();
        tables.push((format!("seed{seed}"), run.tables));
        pooled.extend(run.records);
        seeds.push(run.result);
        targets.push(run.target);
    }
    let pooled_tables = stage(
        "diagnostics",
        magnitude_margin_table(&pooled, cfg.run.bins, cfg.run.bins, DIAGNOSTIC_ATTACK, source),
    )?;
    tables.push(("pooled".to_string(), pooled_tables));
    let diagnostics = tables
        .iter()
        .flat_map(|(stem, _)| {
            [
                format!("diagnostics/{stem}_members.csv"),
                format!("diagnostics/{stem}_nonmembers.csv"),
            ]
        })
        .collect();
    let summaries: Vec<Summary> = seeds.iter().map(|s| s.summary).collect();
    let report = ExperimentReport {
        config: cfg.to_text(),
        dataset_digest: dataset_digest(dataset),
        dataset_size: dataset.len(),
        head: cfg.model.head,
        capacity_proxy: ring_capacity(cfg, dataset.num_classes)?,
        magnitude_source: source,
        diagnostic_attack: DIAGNOSTIC_ATTACK,
        notes: METHOD_NOTES.iter().map(|s| s.to_string()).collect(),
        mean: Summary::mean(&summaries),
        seeds,
        diagnostics,
    };
    Ok(ExperimentOutcome {
        report,
        tables,
        targets,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let dataset = stage("dataset", load_dataset(&cfg.dataset))?;
    run_on_dataset(cfg, &dataset, None)
}

/// Attacks a previously trained target (e.g. restored from a checkpoint)
/// under `cfg` and `seed`. The target must have been trained on the target
/// half of that seed's split.
pub fn attack_saved(
    cfg: &ExperimentConfig,
    dataset: &TabularDataset,
    mut target: Model,
    seed: u64,
) -> Result<(SeedResult, DiagnosticTables)> {
    stage("config", cfg.validate())?;
    let view = DatasetView::new(dataset);
    let split = stage("split", make_split(dataset.len(), seed))?;
    let recipe = cfg.recipe(dataset.dim(), dataset.num_classes);
    let expected = Model::build(&recipe.model, seed)?;
    if expected.shape_manifest() != target.shape_manifest() {
        return Err(LabError::Contract(format!(
            "saved model `{}` does not match the configured architecture `{}`",
            target.shape_manifest(),
            expected.shape_manifest()
        )));
    }
    target.set_mode(Mode::Eval);
    let trained = TrainedModel {
        model: target,
        recipe,
        seed,
    };
    let (report, tables, _, attack_split) = attack_and_diagnose(cfg, view, &split, trained, seed)?;
    let result = SeedResult {
        seed,
        summary: Summary {
            train_acc: report.train_acc,
            test_acc: report.test_acc,
            auc: report.auc,
        },
        thresholds: report.thresholds,
        epochs_trained: 0,
        stopped_early: false,
        members: attack_split.target_train.len(),
        nonmembers: attack_split.target_test.len(),
        pearson_members: tables.members.pearson,
        pearson_nonmembers: tables.nonmembers.pearson,
    };
    Ok((result, tables))
}

fn trend_of(points: &[SweepPoint], axis: fn(&SweepPoint) -> f64) -> (Option<f64>, Option<f64>, PerAttack<Option<f64>>) {
    let x: Vec<f64> = points.iter().map(axis).collect();
    let col = |f: &dyn Fn(&Summary) -> f64| -> Option<f64> {
        let y: Vec<f64> = points.iter().map(|p| f(&p.report.mean)).collect();
        spearman(&x, &y)
    };
    (
        col(&|s| s.train_acc),
        col(&|s| s.test_acc),
        PerAttack::from_fn(|k| col(&|s| *s.auc.get(k))),
    )
}

pub fn sweep_trend(points: &[SweepPoint]) -> Trend {
    let (r1_train_acc, r1_test_acc, r1_auc) = trend_of(points, |p| p.r1);
    let (d_train_acc, d_test_acc, d_auc) = trend_of(points, |p| p.d);
    Trend {
        r1_train_acc,
        r1_test_acc,
        r1_auc,
        d_train_acc,
        d_test_acc,
        d_auc,
    }
}

/// Runs every point of the `(r1, d)` grid as an isolated experiment.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    stage("config", cfg.validate())?;
    if cfg.srcm.is_none() {
        return Err(LabError::config("head", "sweeps need a ring head"));
    }
    let dataset = stage("dataset", load_dataset(&cfg.dataset))?;
    let mut points = Vec::new();
    let mut outcomes = Vec::new();
    for point in cfg.sweep_points() {
        let s = point.srcm.expect("ring head");
        log::info!("sweep point r1={} d={}", s.r1, s.d);
        let outcome = run_on_dataset(&point, &dataset, None)?;
        points.push(SweepPoint {
            r1: s.r1,
            d: s.d,
            report: outcome.report.clone(),
        });
        outcomes.push(outcome);
    }
    let trend = sweep_trend(&points);
    Ok(SweepOutcome {
        report: SweepReport { points, trend },
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn small(head: &str, extra: &str) -> ExperimentConfig {
        let ring = if head == "vanilla" { "" } else { "[srcm]\nr1 = 1\n" };
        parse_config(&format!(
            "[dataset]\nkind = synthetic\nn = 240\ndim = 16\nclasses = 4\nflip_prob = 0.2\n\
             [model]\nhidden = 12\nhead = {head}\n{ring}\
             [optimizer]\nepochs = 3\nbatch_size = 32\n[run]\nattack_epochs = 2\nbins = 4\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn carve_keeps_everything_without_early_stopping() {
        let m: Vec<usize> = (0..20).collect();
        assert_eq!(carve_monitor(&m, &DefenseConfig::None), (m.clone(), vec![]));
        let es = DefenseConfig::EarlyStopping {
            patience: 2,
            min_delta: 0.0,
        };
        let (a, b) = carve_monitor(&m, &es);
        assert_eq!((a.len(), b.len()), (18, 2));
    }

    #[test]
    fn repeat_produces_one_result_per_seed() {
        let cfg = small("srcm", "repeat = 2\nseed = 5\n");
        let out = run_experiment(&cfg).unwrap();
        let seeds: Vec<u64> = out.report.seeds.iter().map(|s| s.seed).collect();
        assert_eq!(seeds, vec![5, 6]);
        assert_eq!(out.tables.len(), 3);
        assert_eq!(out.report.diagnostics.len(), 6);
        assert_eq!(out.report.magnitude_source, MagnitudeSource::PostProjection);
        let m = Summary::mean(&[out.report.seeds[0].summary, out.report.seeds[1].summary]);
        assert_eq!(out.report.mean, m);
        assert!(out.report.capacity_proxy.unwrap() > 0.0);
    }

    #[test]
    fn early_stopping_runs_end_to_end() {
        let cfg = small("vanilla", "").clone();
        let mut cfg = cfg;
        cfg.defense = DefenseConfig::EarlyStopping {
            patience: 1,
            min_delta: 0.0,
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.report.seeds[0].members, 54);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let mut cfg = small("vanilla", "");
        cfg.dataset = DatasetSpec::Purchase {
            path: "/definitely/not/here.csv".into(),
            features: 4,
            classes: 2,
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, LabError::Stage { stage: "dataset", .. }), "{err}");
    }

    #[test]
    fn sweep_has_one_point_per_grid_cell() {
        let cfg = small("srcm", "sweep_r1 = 0.5, 2\n");
        let out = run_sweep(&cfg).unwrap();
        assert_eq!(out.report.points.len(), 2);
        assert_eq!(out.report.points[1].r1, 2.0);
        assert!(out.report.trend.d_train_acc.is_none());
    }
}
