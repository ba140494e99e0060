//! Report files.
//!
//! An experiment directory holds:
//!
//! - `report.json` — the [`ExperimentReport`], pretty-printed, no timestamps;
//! - `results.csv` — one row per seed with the accuracy and AUC columns;
//! - `config.ini` — the resolved configuration, accepted by the parser as is;
//! - `diagnostics/<stem>_{members,nonmembers}.csv` — magnitude × margin tables.
//!
//! A sweep directory holds `sweep.json`, `sweep.csv` and one experiment
//! directory per grid point.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};
use crate::experiment::{ExperimentOutcome, ExperimentReport, SeedResult, Summary, SweepOutcome, SweepReport};

pub const RESULTS_HEADER: &str = "train_acc,test_acc,auc_nn,auc_entropy,auc_mentropy,auc_gradx";

pub fn results_row(s: &Summary) -> String {
    format!(
        "{},{},{},{},{},{}",
        s.train_acc, s.test_acc, s.auc.nn, s.auc.entropy, s.auc.mentropy, s.auc.gradx
    )
}

pub fn results_csv(seeds: &[SeedResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for s in seeds {
        out.push_str(&results_row(&s.summary));
        out.push('\n');
    }
    out
}

pub fn report_json(report: &ExperimentReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)
        .map_err(|e| LabError::Numeric(format!("report serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_report(text: &str) -> Result<ExperimentReport> {
    serde_json::from_str(text).map_err(|e| LabError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn read_report(dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = dir.as_ref().join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    parse_report(&text)
}

/// Writes files and remembers them so a failed emission can be undone.
struct Writer {
    created_files: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
}

impl Writer {
    fn mkdir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            if let Some(parent) = dir.parent() {
                if !parent.as_os_str().is_empty() {
                    self.mkdir(parent)?;
                }
            }
            fs::create_dir(dir).map_err(|e| LabError::io(dir, e))?;
            self.created_dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    fn write(&mut self, path: PathBuf, contents: &[u8]) -> Result<()> {
        fs::write(&path, contents).map_err(|e| LabError::io(&path, e))?;
        self.created_files.push(path);
        Ok(())
    }

    fn rollback(self) {
        for f in self.created_files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

fn emit_experiment(w: &mut Writer, outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    w.mkdir(dir)?;
    w.write(dir.join("report.json"), report_json(&outcome.report)?.as_bytes())?;
    w.write(dir.join("results.csv"), results_csv(&outcome.report.seeds).as_bytes())?;
    w.write(dir.join("config.ini"), outcome.report.config.as_bytes())?;
    let diag = dir.join("diagnostics");
    w.mkdir(&diag)?;
    for (stem, tables) in &outcome.tables {
        w.write(diag.join(format!("{stem}_members.csv")), tables.members.to_csv().as_bytes())?;
        w.write(
            diag.join(format!("{stem}_nonmembers.csv")),
            tables.nonmembers.to_csv().as_bytes(),
        )?;
    }
    Ok(())
}

fn transactional(dir: &Path, f: impl FnOnce(&mut Writer) -> Result<()>) -> Result<Vec<PathBuf>> {
    let mut w = Writer {
        created_files: Vec::new(),
        created_dirs: Vec::new(),
    };
    match f(&mut w) {
        Ok(()) => Ok(w.created_files),
        Err(e) => {
            log::warn!("removing partial output under {}", dir.display());
            w.rollback();
            Err(e)
        }
    }
}

/// Writes the experiment files under `dir`; on failure everything written so
/// far is removed. Returns the files written.
pub fn emit_report(outcome: &ExperimentOutcome, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    transactional(dir, |w| emit_experiment(w, outcome, dir))
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = format!("r1,d,{RESULTS_HEADER}\n");
    for p in &report.points {
        let _ = writeln!(out, "{},{},{}", p.r1, p.d, results_row(&p.report.mean));
    }
    out
}

pub fn point_dir_name(index: usize, r1: f64, d: f64) -> String {
    format!("point{index:02}_r1_{r1}_d_{d}")
}

pub fn emit_sweep(outcome: &SweepOutcome, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    transactional(dir, |w| {
        w.mkdir(dir)?;
        let json = serde_json::to_string_pretty(&outcome.report)
            .map_err(|e| LabError::Numeric(format!("sweep serialization: {e}")))?;
        w.write(dir.join("sweep.json"), format!("{json}\n").as_bytes())?;
        w.write(dir.join("sweep.csv"), sweep_csv(&outcome.report).as_bytes())?;
        for (i, (point, sub)) in outcome.report.points.iter().zip(&outcome.outcomes).enumerate() {
            emit_experiment(w, sub, &dir.join(point_dir_name(i, point.r1, point.d)))?;
        }
        Ok(())
    })
}
