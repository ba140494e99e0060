//! Line-oriented experiment configuration.
//!
//! ```text
//! [dataset]
//! kind = synthetic        # or `purchase` with `path = ...`
//! n = 2000
//! dim = 100
//! classes = 10
//! flip_prob = 0.4
//!
//! [model]
//! hidden = 256, 128
//! head = srcm
//!
//! [srcm]
//! r1 = 2
//! ```
//!
//! Every section except `[dataset]` and `[model]` may be omitted. Lines
//! starting with `#` or `;` are comments. [`ExperimentConfig::to_text`] writes
//! the fully resolved configuration in the same format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackerConfig, Recipe};
use crate::datasets::{PURCHASE_CLASSES, PURCHASE_FEATURES};
use crate::defenses::DefenseConfig;
use crate::error::{LabError, Result};
use crate::nn::{Activation, ModelSpec, OptimizerConfig, TrainConfig};
use crate::srcm::{HeadDesign, SrcmConfig};

const SECTIONS: [&str; 6] = ["dataset", "model", "srcm", "defense", "optimizer", "run"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Headerless CSV, label first, then binary features.
    Purchase {
        path: PathBuf,
        features: usize,
        classes: usize,
    },
    Synthetic {
        n: usize,
        dim: usize,
        classes: usize,
        flip_prob: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub head: HeadDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    /// Number of seeds, `seed .. seed + repeat`.
    pub repeat: usize,
    pub sweep_r1: Vec<f64>,
    pub sweep_d: Vec<f64>,
    /// Bins per axis of the magnitude × margin tables.
    pub bins: usize,
    pub standardize: bool,
    pub attack_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    /// Present exactly when the head uses the ring activation.
    pub srcm: Option<SrcmConfig>,
    pub defense: DefenseConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub run: RunSection,
}

struct Entry {
    value: String,
    line: usize,
}

/// Key-value pairs grouped by section; entries are removed as they are read
/// so that leftovers can be reported as unknown.
struct Sections(BTreeMap<&'static str, BTreeMap<String, Entry>>);

fn parse_value<T: FromStr>(key: &str, entry: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry.value.parse::<T>().map_err(|e| {
        LabError::config(
            key,
            format!("line {}: cannot parse `{}`: {e}", entry.line, entry.value),
        )
    })
}

fn parse_list<T: FromStr>(key: &str, entry: &Entry) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if entry.value.trim().is_empty() {
        return Ok(Vec::new());
    }
    entry
        .value
        .split(',')
        .map(|item| {
            item.trim().parse::<T>().map_err(|e| {
                LabError::config(
                    key,
                    format!("line {}: cannot parse list item `{}`: {e}", entry.line, item.trim()),
                )
            })
        })
        .collect()
}

impl Sections {
    fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<&'static str, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<&'static str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| LabError::Parse {
                        line,
                        msg: format!("unterminated section header `{s}`"),
                    })?
                    .trim();
                let known = SECTIONS.iter().find(|&&k| k == name).ok_or_else(|| {
                    LabError::config(name, format!("line {line}: unknown section"))
                })?;
                current = Some(known);
                map.entry(known).or_default();
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| LabError::Parse {
                line,
                msg: format!("expected `key = value`, got `{s}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(LabError::Parse {
                    line,
                    msg: "empty key".into(),
                });
            }
            let section = current.ok_or_else(|| {
                LabError::config(key, format!("line {line}: key outside of any section"))
            })?;
            let entries = map.entry(section).or_default();
            if entries.contains_key(key) {
                return Err(LabError::config(key, format!("line {line}: duplicate key")));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(Sections(map))
    }

    fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.0.get_mut(section).and_then(|m| m.remove(key))
    }

    fn opt<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(section, key).map(|e| parse_value(key, &e)).transpose()
    }

    fn get_or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(section, key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(section, key)?
            .ok_or_else(|| LabError::config(key, format!("missing required key in [{section}]")))
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(section, key).map(|e| parse_list(key, &e)).transpose()
    }

    fn has_section(&self, section: &str) -> bool {
        self.0.get(section).is_some_and(|m| !m.is_empty())
    }

    /// Errors on the first key nobody consumed.
    fn finish(self) -> Result<()> {
        for (section, entries) in self.0 {
            if let Some((key, e)) = entries.into_iter().min_by_key(|(_, e)| e.line) {
                return Err(LabError::config(
                    key,
                    format!("line {}: unknown key in [{section}]", e.line),
                ));
            }
        }
        Ok(())
    }
}

fn parse_dataset(s: &mut Sections) -> Result<DatasetSpec> {
    let kind: String = s.require("dataset", "kind")?;
    match kind.as_str() {
        "purchase" => Ok(DatasetSpec::Purchase {
            path: PathBuf::from(s.require::<String>("dataset", "path")?),
            features: s.get_or("dataset", "features", PURCHASE_FEATURES)?,
            classes: s.get_or("dataset", "classes", PURCHASE_CLASSES)?,
        }),
        "synthetic" => Ok(DatasetSpec::Synthetic {
            n: s.require("dataset", "n")?,
            dim: s.require("dataset", "dim")?,
            classes: s.require("dataset", "classes")?,
            flip_prob: s.get_or("dataset", "flip_prob", 0.0)?,
            seed: s.get_or("dataset", "seed", 0)?,
        }),
        other => Err(LabError::config(
            "kind",
            format!("unknown dataset kind `{other}` (purchase, synthetic)"),
        )),
    }
}

fn parse_defense(s: &mut Sections) -> Result<DefenseConfig> {
    let kind: String = s.get_or("defense", "kind", "none".to_string())?;
    let d = match kind.as_str() {
        "none" => DefenseConfig::None,
        "label_smoothing" => DefenseConfig::LabelSmoothing {
            epsilon: s.get_or("defense", "epsilon", DefenseConfig::DEFAULT_EPSILON)?,
        },
        "confidence_penalty" => DefenseConfig::ConfidencePenalty {
            beta: s.get_or("defense", "beta", DefenseConfig::DEFAULT_BETA)?,
        },
        "early_stopping" => DefenseConfig::EarlyStopping {
            patience: s.get_or("defense", "patience", DefenseConfig::DEFAULT_PATIENCE)?,
            min_delta: s.get_or("defense", "min_delta", 0.0)?,
        },
        other => {
            return Err(LabError::config(
                "kind",
                format!(
                    "unknown defense `{other}` (none, label_smoothing, confidence_penalty, early_stopping)"
                ),
            ))
        }
    };
    Ok(d)
}

/// Parses and validates a configuration; defaults are filled in.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut s = Sections::parse(text)?;
    let dataset = parse_dataset(&mut s)?;

    let hidden: Vec<usize> = s
        .list("model", "hidden")?
        .ok_or_else(|| LabError::config("hidden", "missing required key in [model]"))?;
    let model = ModelSection {
        hidden,
        activation: s.get_or("model", "activation", Activation::Tanh)?,
        dropout: s.get_or("model", "dropout", 0.0)?,
        head: s.get_or("model", "head", HeadDesign::Vanilla)?,
    };

    let srcm = if model.head.uses_ring() {
        let r1: f64 = s.require("srcm", "r1")?;
        let d: f64 = s.get_or("srcm", "d", 1.0)?;
        let default_width = model.hidden.last().copied().unwrap_or(0);
        let hidden_width = s.get_or("srcm", "hidden_width", default_width)?;
        let mut cfg = SrcmConfig::new(r1, d, hidden_width)?;
        cfg.all_on = model.head != HeadDesign::DesignB;
        Some(cfg)
    } else {
        if s.has_section("srcm") {
            return Err(LabError::config(
                "head",
                "[srcm] keys are only valid with a ring head (design_a, design_b, srcm)",
            ));
        }
        None
    };

    let defense = parse_defense(&mut s)?;
    let base = OptimizerConfig::default();
    let optimizer = OptimizerConfig {
        lr: s.get_or("optimizer", "lr", base.lr)?,
        momentum: s.get_or("optimizer", "momentum", base.momentum)?,
        weight_decay: s.get_or("optimizer", "weight_decay", base.weight_decay)?,
    };
    let tdef = TrainConfig::default();
    let train = TrainConfig {
        epochs: s.get_or("optimizer", "epochs", tdef.epochs)?,
        batch_size: s.get_or("optimizer", "batch_size", tdef.batch_size)?,
        step_decay: s.get_or("optimizer", "step_decay", tdef.step_decay)?,
    };
    let run = RunSection {
        seed: s.get_or("run", "seed", 0)?,
        repeat: s.get_or("run", "repeat", 1)?,
        sweep_r1: s.list("run", "sweep_r1")?.unwrap_or_default(),
        sweep_d: s.list("run", "sweep_d")?.unwrap_or_default(),
        bins: s.get_or("run", "bins", 20)?,
        standardize: s.get_or("run", "standardize", false)?,
        attack_epochs: s.get_or("run", "attack_epochs", AttackerConfig::default().epochs)?,
    };
    s.finish()?;

    let cfg = ExperimentConfig {
        dataset,
        model,
        srcm,
        defense,
        optimizer,
        train,
        run,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Checks every value that training would otherwise trip over later.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Purchase { features, classes, .. } => {
                if *features == 0 {
                    return Err(LabError::config("features", "must be positive"));
                }
                if *classes < 2 {
                    return Err(LabError::config("classes", "need at least 2 classes"));
                }
            }
            DatasetSpec::Synthetic {
                n,
                dim,
                classes,
                flip_prob,
                ..
            } => {
                if *dim == 0 {
                    return Err(LabError::config("dim", "must be positive"));
                }
                if *classes < 2 {
                    return Err(LabError::config("classes", "need at least 2 classes"));
                }
                if *n < 4 || n % classes != 0 {
                    return Err(LabError::config(
                        "n",
                        format!("must be >= 4 and a multiple of classes ({classes})"),
                    ));
                }
                if !(0.0..0.5).contains(flip_prob) {
                    return Err(LabError::config("flip_prob", "must be in [0, 0.5)"));
                }
            }
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(LabError::config("hidden", "need at least one positive width"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(LabError::config("dropout", "must be in [0, 1)"));
        }
        if let Some(s) = &self.srcm {
            s.validate()?;
        }
        if self.model.head.uses_ring() != self.srcm.is_some() {
            return Err(LabError::config("r1", "ring radii must be set exactly for ring heads"));
        }
        self.defense.validate()?;
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(LabError::config("batch_size", "must be positive"));
        }
        if self.run.repeat == 0 {
            return Err(LabError::config("repeat", "must be >= 1"));
        }
        if self.run.bins == 0 {
            return Err(LabError::config("bins", "must be positive"));
        }
        if self.run.attack_epochs == 0 {
            return Err(LabError::config("attack_epochs", "must be positive"));
        }
        if self.srcm.is_none() && !(self.run.sweep_r1.is_empty() && self.run.sweep_d.is_empty()) {
            return Err(LabError::config("sweep_r1", "sweeps need a ring head"));
        }
        for (key, values) in [("sweep_r1", &self.run.sweep_r1), ("sweep_d", &self.run.sweep_d)] {
            if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(LabError::config(key, "all values must be > 0"));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, input_width: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            input_width,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            dropout: self.model.dropout,
            head: self.model.head,
            srcm: self.srcm,
            num_classes,
        }
    }

    pub fn recipe(&self, input_width: usize, num_classes: usize) -> Recipe {
        Recipe {
            model: self.model_spec(input_width, num_classes),
            defense: self.defense,
            optimizer: self.optimizer,
            train: self.train,
        }
    }

    pub fn attacker(&self) -> AttackerConfig {
        AttackerConfig {
            epochs: self.run.attack_epochs,
            ..AttackerConfig::default()
        }
    }

    /// The configurations of a sweep: every `(r1, d)` pair of the grid, with
    /// the base value standing in for an empty axis. Sweep lists are cleared
    /// in the returned configurations.
    pub fn sweep_points(&self) -> Vec<ExperimentConfig> {
        let Some(base) = self.srcm else {
            return vec![self.clone()];
        };
        let r1s = if self.run.sweep_r1.is_empty() {
            vec![base.r1]
        } else {
            self.run.sweep_r1.clone()
        };
        let ds = if self.run.sweep_d.is_empty() {
            vec![base.d]
        } else {
            self.run.sweep_d.clone()
        };
        let mut out = Vec::with_capacity(r1s.len() * ds.len());
        for &r1 in &r1s {
            for &d in &ds {
                let mut c = self.clone();
                c.srcm = Some(SrcmConfig { r1, d, ..base });
                c.run.sweep_r1.clear();
                c.run.sweep_d.clear();
                out.push(c);
            }
        }
        out
    }

    /// Applies `LAB_SEED` from `lookup` (normally the process environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = lookup("LAB_SEED") {
            self.run.seed = v
                .trim()
                .parse()
                .map_err(|e| LabError::config("LAB_SEED", format!("`{v}`: {e}")))?;
        }
        Ok(())
    }

    /// Fully resolved configuration in the input format; parsing it back
    /// yields an equal value.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        // writes into a String cannot fail
        let _ = writeln!(o, "[dataset]");
        match &self.dataset {
            DatasetSpec::Purchase {
                path,
                features,
                classes,
            } => {
                let _ = writeln!(o, "kind = purchase");
                let _ = writeln!(o, "path = {}", path.display());
                let _ = writeln!(o, "features = {features}");
                let _ = writeln!(o, "classes = {classes}");
            }
            DatasetSpec::Synthetic {
                n,
                dim,
                classes,
                flip_prob,
                seed,
            } => {
                let _ = writeln!(o, "kind = synthetic");
                let _ = writeln!(o, "n = {n}");
                let _ = writeln!(o, "dim = {dim}");
                let _ = writeln!(o, "classes = {classes}");
                let _ = writeln!(o, "flip_prob = {flip_prob}");
                let _ = writeln!(o, "seed = {seed}");
            }
        }
        let hidden: Vec<String> = self.model.hidden.iter().map(usize::to_string).collect();
        let _ = writeln!(o, "\n[model]");
        let _ = writeln!(o, "hidden = {}", hidden.join(", "));
        let _ = writeln!(o, "activation = {}", self.model.activation);
        let _ = writeln!(o, "dropout = {}", self.model.dropout);
        let _ = writeln!(o, "head = {}", self.model.head);
        if let Some(s) = &self.srcm {
            let _ = writeln!(o, "\n[srcm]");
            let _ = writeln!(o, "r1 = {}", s.r1);
            let _ = writeln!(o, "d = {}", s.d);
            let _ = writeln!(o, "hidden_width = {}", s.hidden_width);
        }
        let _ = writeln!(o, "\n[defense]");
        let _ = writeln!(o, "kind = {}", self.defense.name());
        match self.defense {
            DefenseConfig::None => {}
            DefenseConfig::LabelSmoothing { epsilon } => {
                let _ = writeln!(o, "epsilon = {epsilon}");
            }
            DefenseConfig::ConfidencePenalty { beta } => {
                let _ = writeln!(o, "beta = {beta}");
            }
            DefenseConfig::EarlyStopping { patience, min_delta } => {
                let _ = writeln!(o, "patience = {patience}");
                let _ = writeln!(o, "min_delta = {min_delta}");
            }
        }
        let _ = writeln!(o, "\n[optimizer]");
        let _ = writeln!(o, "lr = {}", self.optimizer.lr);
        let _ = writeln!(o, "momentum = {}", self.optimizer.momentum);
        let _ = writeln!(o, "weight_decay = {}", self.optimizer.weight_decay);
        let _ = writeln!(o, "epochs = {}", self.train.epochs);
        let _ = writeln!(o, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(o, "step_decay = {}", self.train.step_decay);
        let _ = writeln!(o, "\n[run]");
        let _ = writeln!(o, "seed = {}", self.run.seed);
        let _ = writeln!(o, "repeat = {}", self.run.repeat);
        let _ = writeln!(o, "sweep_r1 = {}", join(&self.run.sweep_r1));
        let _ = writeln!(o, "sweep_d = {}", join(&self.run.sweep_d));
        let _ = writeln!(o, "bins = {}", self.run.bins);
        let _ = writeln!(o, "standardize = {}", self.run.standardize);
        let _ = writeln!(o, "attack_epochs = {}", self.run.attack_epochs);
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[dataset]
kind = synthetic
n = 400
dim = 20
classes = 4

[model]
hidden = 32, 16
";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.run.seed, 0);
        assert_eq!(cfg.optimizer.momentum, 0.09);
        assert_eq!(cfg.optimizer.weight_decay, 5e-4);
        assert_eq!(cfg.optimizer.lr, 0.1);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.model.head, HeadDesign::Vanilla);
        assert_eq!(cfg.model.activation, Activation::Tanh);
        assert_eq!(cfg.defense, DefenseConfig::None);
        assert_eq!(cfg.run.repeat, 1);
        assert_eq!(cfg.run.bins, 20);
        assert!(cfg.srcm.is_none());
    }

    #[test]
    fn ring_head_without_r1_is_rejected() {
        let text = MINIMAL.replace("hidden = 32, 16", "hidden = 32, 16\nhead = srcm");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(&err, LabError::Config { key, .. } if key == "r1"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MINIMAL}\n[run]\nfoo = 3\n");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(&err, LabError::Config { key, .. } if key == "foo"), "{err}");
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn bad_radii_are_rejected() {
        for (r1, d, key) in [("0", "1", "r1"), ("-1", "1", "r1"), ("1", "0", "d"), ("1", "-2", "d")] {
            let text = format!("{MINIMAL}head = srcm\n[srcm]\nr1 = {r1}\nd = {d}\n");
            let err = parse_config(&text).unwrap_err();
            assert!(matches!(&err, LabError::Config { key: k, .. } if k == key), "{err}");
        }
    }

    #[test]
    fn malformed_values_name_their_key() {
        let text = MINIMAL.replace("dim = 20", "dim = twenty");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(&err, LabError::Config { key, .. } if key == "dim"), "{err}");
        assert!(parse_config("[dataset]\nkind synthetic\n").is_err());
        assert!(parse_config("[nope]\n").unwrap_err().is_config());
    }

    #[test]
    fn echo_round_trips() {
        let text = format!(
            "{MINIMAL}head = design_b\nactivation = relu\ndropout = 0.25\n\
             [srcm]\nr1 = 0.3\nd = 0.7\n[defense]\nkind = label_smoothing\nepsilon = 0.05\n\
             [optimizer]\nmomentum = 0.9\nepochs = 7\n[run]\nseed = 11\nrepeat = 2\nsweep_r1 = 0.5, 1, 2\n"
        );
        let cfg = parse_config(&text).unwrap();
        assert!(!cfg.srcm.unwrap().all_on);
        assert_eq!(cfg.srcm.unwrap().hidden_width, 16);
        let echoed = cfg.to_text();
        assert_eq!(parse_config(&echoed).unwrap(), cfg);
        assert_eq!(parse_config(&echoed).unwrap().to_text(), echoed);
    }

    #[test]
    fn srcm_keys_need_a_ring_head() {
        let text = format!("{MINIMAL}[srcm]\nr1 = 1\n");
        assert!(parse_config(&text).unwrap_err().is_config());
    }

    #[test]
    fn sweep_points_cover_the_grid() {
        let text = format!("{MINIMAL}head = srcm\n[srcm]\nr1 = 1\n[run]\nsweep_r1 = 0.5, 1, 2\nsweep_d = 1, 2\n");
        let pts = parse_config(&text).unwrap().sweep_points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[5].srcm.unwrap().r1, 2.0);
        assert_eq!(pts[5].srcm.unwrap().d, 2.0);
        assert!(pts.iter().all(|p| p.run.sweep_r1.is_empty()));
    }

    #[test]
    fn env_seed_override() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.apply_env(|k| (k == "LAB_SEED").then(|| "42".to_string())).unwrap();
        assert_eq!(cfg.run.seed, 42);
        assert!(cfg.apply_env(|_| Some("x".into())).unwrap_err().is_config());
    }
}
