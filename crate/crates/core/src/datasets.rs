//! Purchase-style tabular data: CSV ingestion, a synthetic stand-in, and a
//! content digest that pins which copy a report was computed on.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::LabeledData;

pub const PURCHASE_FEATURES: usize = 600;
pub const PURCHASE_CLASSES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    File {
        path: PathBuf,
    },
    Synthetic {
        n: usize,
        dim: usize,
        classes: usize,
        flip_prob: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        LabeledData {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Reads a headerless CSV whose rows are `label,f1,...,f600` with binary features.
pub fn load_purchase_csv(path: impl AsRef<Path>) -> Result<TabularDataset> {
    load_binary_csv(path, PURCHASE_FEATURES, PURCHASE_CLASSES)
}

/// Same format as [`load_purchase_csv`] with explicit feature and class counts.
pub fn load_binary_csv(
    path: impl AsRef<Path>,
    width: usize,
    classes: usize,
) -> Result<TabularDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width + 1 {
            return Err(LabError::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", width + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| LabError::Parse {
            line: lineno,
            msg: format!("label `{}` is not a class index", fields[0]),
        })?;
        if label >= classes {
            return Err(LabError::Parse {
                line: lineno,
                msg: format!("label {label} outside 0..{classes}"),
            });
        }
        for (j, f) in fields[1..].iter().enumerate() {
            let v = match *f {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(LabError::Parse {
                        line: lineno,
                        msg: format!("feature {} is `{other}`, expected 0 or 1", j + 1),
                    })
                }
            };
            data.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(LabError::Input(format!("{} holds no samples", path.display())));
    }
    Ok(TabularDataset {
        features: Matrix::from_vec(labels.len(), width, data)?,
        labels,
        num_classes: classes,
        provenance: Provenance::File {
            path: path.to_path_buf(),
        },
    })
}

/// Writes `ds` in the format read by [`load_binary_csv`].
pub fn write_binary_csv(ds: &TabularDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(ds.len() * (2 * ds.dim() + 4));
    for (row, label) in ds.features.row_iter().zip(&ds.labels) {
        out.push_str(&label.to_string());
        for &v in row {
            out.push(',');
            out.push(if v != 0.0 { '1' } else { '0' });
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| LabError::io(path, e))
}

/// One random binary prototype per class; each sample copies its class
/// prototype and flips every bit independently with probability `flip_prob`.
/// Sample `i` belongs to class `i % classes`.
pub fn generate_synthetic(
    n: usize,
    dim: usize,
    classes: usize,
    flip_prob: f64,
    seed: u64,
) -> Result<TabularDataset> {
    if classes == 0 || dim == 0 || n == 0 {
        return Err(LabError::config("dataset", "n, dim and classes must be positive"));
    }
    if !n.is_multiple_of(classes) {
        return Err(LabError::config(
            "n",
            format!("{n} samples cannot be split evenly over {classes} classes"),
        ));
    }
    if !(0.0..0.5).contains(&flip_prob) {
        return Err(LabError::config("flip_prob", "must be in [0, 0.5)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<bool>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen::<bool>()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for &bit in &prototypes[class] {
            let flipped = flip_prob > 0.0 && rng.gen::<f64>() < flip_prob;
            data.push(if bit != flipped { 1.0 } else { 0.0 });
        }
        labels.push(class);
    }
    Ok(TabularDataset {
        features: Matrix::from_vec(n, dim, data)?,
        labels,
        num_classes: classes,
        provenance: Provenance::Synthetic {
            n,
            dim,
            classes,
            flip_prob,
            seed,
        },
    })
}

/// SHA-256 over shape, features and labels, as 64 lowercase hex characters.
pub fn dataset_digest(ds: &TabularDataset) -> String {
    let mut h = Sha256::new();
    for v in [ds.len(), ds.dim(), ds.num_classes] {
        h.update((v as u64).to_le_bytes());
    }
    for v in ds.features.as_slice() {
        h.update(v.to_le_bytes());
    }
    for &l in &ds.labels {
        h.update((l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_text(label: usize, width: usize) -> String {
        let mut s = label.to_string();
        for j in 0..width {
            s.push_str(if j % 3 == 0 { ",1" } else { ",0" });
        }
        s
    }

    #[test]
    fn parses_purchase_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, format!("{}\n{}\n", row_text(5, 600), row_text(99, 600))).unwrap();
        let ds = load_purchase_csv(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 600);
        assert_eq!(ds.labels, vec![5, 99]);
        assert_eq!(ds.features.get(0, 0), 1.0);
        assert_eq!(ds.features.get(0, 1), 0.0);
    }

    #[test]
    fn short_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, format!("{}\n{}\n", row_text(1, 600), row_text(2, 599))).unwrap();
        assert!(matches!(load_purchase_csv(&p), Err(LabError::Parse { line: 2, .. })));
    }

    #[test]
    fn bad_values_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, row_text(100, 600)).unwrap();
        assert!(matches!(load_purchase_csv(&p), Err(LabError::Parse { line: 1, .. })));
        let bad = row_text(3, 600).replacen(",1", ",2", 1);
        fs::write(&p, bad).unwrap();
        assert!(matches!(load_purchase_csv(&p), Err(LabError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, "").unwrap();
        assert!(matches!(load_purchase_csv(&p), Err(LabError::Input(_))));
        assert!(matches!(
            load_purchase_csv(dir.path().join("missing.csv")),
            Err(LabError::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let ds = generate_synthetic(60, 12, 6, 0.2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        write_binary_csv(&ds, &p).unwrap();
        let back = load_binary_csv(&p, 12, 6).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(dataset_digest(&back), dataset_digest(&ds));
    }

    #[test]
    fn synthetic_is_balanced_and_reproducible() {
        let ds = generate_synthetic(1000, 20, 10, 0.1, 0).unwrap();
        for c in 0..10 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert_eq!(ds, generate_synthetic(1000, 20, 10, 0.1, 0).unwrap());
        assert_ne!(ds.features, generate_synthetic(1000, 20, 10, 0.1, 1).unwrap().features);
    }

    #[test]
    fn zero_flip_copies_prototype() {
        let ds = generate_synthetic(40, 30, 4, 0.0, 2).unwrap();
        for i in 4..40 {
            assert_eq!(ds.features.row(i), ds.features.row(i % 4));
        }
    }

    #[test]
    fn synthetic_config_errors() {
        assert!(generate_synthetic(10, 5, 3, 0.1, 0).unwrap_err().is_config());
        assert!(generate_synthetic(12, 5, 3, 0.5, 0).unwrap_err().is_config());
    }

    #[test]
    fn digest_tracks_content() {
        let a = generate_synthetic(20, 8, 4, 0.2, 9).unwrap();
        let d = dataset_digest(&a);
        assert_eq!(d.len(), 64);
        assert!(d.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(d, dataset_digest(&generate_synthetic(20, 8, 4, 0.2, 9).unwrap()));
        let mut b = a.clone();
        let v = b.features.get(3, 3);
        b.features.set(3, 3, 1.0 - v);
        assert_ne!(d, dataset_digest(&b));
    }
}
