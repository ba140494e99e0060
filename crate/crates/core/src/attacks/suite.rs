use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::access::{DatasetView, Stage};
use crate::attacks::metrics::{entropy_score, gradx_l2_scores, mentropy_score};
use crate::attacks::nn_attacker::{train_nn_attacker, AttackerConfig, AttackerNet};
use crate::attacks::{auc, AttackKind, AttackScore, MembershipSplit, PerAttack};
use crate::defenses::DefenseConfig;
use crate::diagnostics::PredictionRecord;
use crate::error::{LabError, Result};
use crate::nn::{softmax, LabeledData, Model, ModelSpec, Mode, OptimizerConfig, TrainConfig};

/// Everything about how a model was trained except its seed and data half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub model: ModelSpec,
    pub defense: DefenseConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub recipe: Recipe,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackOptions {
    pub attacker: AttackerConfig,
    /// Subtract the shadow per-class mean from metric scores before ranking.
    pub standardize: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub train_acc: f64,
    pub test_acc: f64,
    pub auc: PerAttack<f64>,
    /// Median shadow score per attack; used for per-sample correctness flags.
    pub thresholds: PerAttack<f64>,
    #[serde(skip)]
    pub scores: PerAttack<Vec<AttackScore>>,
    /// Target members followed by target non-members.
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

/// Predictions plus metric scores for one labeled set.
struct Scored {
    records: Vec<PredictionRecord>,
    entropy: Vec<f64>,
    mentropy: Vec<f64>,
    gradx: Vec<f64>,
}

fn score_set(model: &Model, data: &LabeledData, ids: &[usize], is_member: bool) -> Result<Scored> {
    const CHUNK: usize = 512;
    let mut records = Vec::with_capacity(data.len());
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(CHUNK) {
        let pass = model.forward_with(&data.features.select_rows(chunk), Mode::Eval, None)?;
        let probs = softmax(pass.logits());
        for (r, &i) in chunk.iter().enumerate() {
            let g = pass.bottleneck().row(r);
            let magnitude = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            records.push(PredictionRecord::new(
                ids[i],
                probs.row(r).to_vec(),
                data.labels[i],
                is_member,
                magnitude,
            ));
        }
    }
    let entropy = records
        .iter()
        .map(|r| entropy_score(&r.probs))
        .collect::<Result<Vec<_>>>()?;
    let mentropy = records
        .iter()
        .map(|r| mentropy_score(&r.probs, r.label))
        .collect::<Result<Vec<_>>>()?;
    let gradx = gradx_l2_scores(model, &data.features, &data.labels)?;
    Ok(Scored {
        records,
        entropy,
        mentropy,
        gradx,
    })
}

fn merge(a: Scored, b: Scored) -> Scored {
    let cat = |mut x: Vec<f64>, y: Vec<f64>| {
        x.extend(y);
        x
    };
    let mut records = a.records;
    records.extend(b.records);
    Scored {
        records,
        entropy: cat(a.entropy, b.entropy),
        mentropy: cat(a.mentropy, b.mentropy),
        gradx: cat(a.gradx, b.gradx),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean score per class label over the shadow records.
fn class_means(records: &[PredictionRecord], scores: &[f64]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (r, &s) in records.iter().zip(scores) {
        let e = acc.entry(r.label).or_default();
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn standardized(records: &[PredictionRecord], scores: &[f64], means: &BTreeMap<usize, f64>) -> Vec<f64> {
    records
        .iter()
        .zip(scores)
        .map(|(r, &s)| s - means.get(&r.label).copied().unwrap_or(0.0))
        .collect()
}

fn metric_scores(
    set: &Scored,
    nn: Vec<f64>,
    means: Option<&PerAttack<BTreeMap<usize, f64>>>,
) -> PerAttack<Vec<f64>> {
    let mut out = PerAttack {
        nn,
        entropy: set.entropy.clone(),
        mentropy: set.mentropy.clone(),
        gradx: set.gradx.clone(),
    };
    if let Some(means) = means {
        for kind in [AttackKind::Entropy, AttackKind::MEntropy, AttackKind::GradX] {
            let s = standardized(&set.records, out.get(kind), means.get(kind));
            *out.get_mut(kind) = s;
        }
    }
    out
}

fn accuracy_of(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records.iter().filter(|r| r.predicted_class() == r.label).count();
    hits as f64 / records.len() as f64
}

/// Runs the NN, entropy, modified-entropy and input-gradient attacks.
///
/// The attacker network, thresholds and standardization statistics are fit on
/// the shadow half only; target rows are read last, for evaluation. Both
/// models must share one [`Recipe`] and be in evaluation mode.
pub fn run_attack_suite(
    target: &TrainedModel,
    shadow: &TrainedModel,
    split: &MembershipSplit,
    data: DatasetView<'_>,
    opts: &AttackOptions,
) -> Result<AttackReport> {
    if target.recipe != shadow.recipe {
        return Err(LabError::Contract(
            "shadow model was not trained with the target's recipe".into(),
        ));
    }
    if target.model.mode != Mode::Eval || shadow.model.mode != Mode::Eval {
        return Err(LabError::State("attacks need evaluation-mode models".into()));
    }

    // fitting: shadow half only
    let shadow_in = data.gather(&split.shadow_train, Stage::AttackFitting);
    let shadow_out = data.gather(&split.shadow_test, Stage::AttackFitting);
    let shadow_set = merge(
        score_set(&shadow.model, &shadow_in, &split.shadow_train, true)?,
        score_set(&shadow.model, &shadow_out, &split.shadow_test, false)?,
    );
    let attacker: AttackerNet = train_nn_attacker(&shadow_set.records, &opts.attacker, opts.seed)?;
    let means = opts.standardize.then(|| PerAttack {
        nn: BTreeMap::new(),
        entropy: class_means(&shadow_set.records, &shadow_set.entropy),
        mentropy: class_means(&shadow_set.records, &shadow_set.mentropy),
        gradx: class_means(&shadow_set.records, &shadow_set.gradx),
    });
    let shadow_nn = attacker.score_records(&shadow_set.records)?;
    let shadow_scores = metric_scores(&shadow_set, shadow_nn, means.as_ref());
    let thresholds = PerAttack::from_fn(|k| median(shadow_scores.get(k)));

    // evaluation: target half
    let target_in = data.gather(&split.target_train, Stage::AttackEvaluation);
    let target_out = data.gather(&split.target_test, Stage::AttackEvaluation);
    let members = score_set(&target.model, &target_in, &split.target_train, true)?;
    let train_acc = accuracy_of(&members.records);
    let nonmembers = score_set(&target.model, &target_out, &split.target_test, false)?;
    let test_acc = accuracy_of(&nonmembers.records);
    let target_set = merge(members, nonmembers);
    let target_nn = attacker.score_records(&target_set.records)?;
    let target_scores = metric_scores(&target_set, target_nn, means.as_ref());

    let scores = PerAttack::from_fn(|k| {
        target_set
            .records
            .iter()
            .zip(target_scores.get(k))
            .map(|(r, &score)| AttackScore {
                sample_id: r.sample_id,
                score,
                is_member: r.is_member,
            })
            .collect::<Vec<_>>()
    });
    let aucs = PerAttack::try_from_fn(|k| auc(scores.get(k)))?;

    let mut records = target_set.records;
    for (i, rec) in records.iter_mut().enumerate() {
        rec.attack_correct = PerAttack::from_fn(|k| {
            let guess = target_scores.get(k)[i] >= *thresholds.get(k);
            guess == rec.is_member
        });
    }

    Ok(AttackReport {
        train_acc,
        test_acc,
        auc: aucs,
        thresholds,
        scores,
        records,
    })
}
