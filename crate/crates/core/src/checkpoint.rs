//! Model checkpoints: one manifest line, then every parameter as a
//! little-endian `f64` (weights row-major, then bias, layer by layer).

use std::fs;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::nn::{Model, ModelSpec};

fn param_slices(model: &Model) -> impl Iterator<Item = &[f64]> {
    model
        .layers()
        .iter()
        .filter_map(|l| l.affine())
        .flat_map(|a| [a.weight.as_slice(), a.bias.as_slice()])
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = model.shape_manifest().into_bytes();
    out.push(b'\n');
    for v in param_slices(model).flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Rebuilds the architecture from `spec` and fills it from `bytes`. The
/// manifest line must match the architecture exactly.
pub fn from_bytes(bytes: &[u8], spec: &ModelSpec, seed: u64) -> Result<Model> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| LabError::Parse {
            line: 1,
            msg: "checkpoint has no manifest line".into(),
        })?;
    let manifest = std::str::from_utf8(&bytes[..nl]).map_err(|e| LabError::Parse {
        line: 1,
        msg: format!("manifest is not UTF-8: {e}"),
    })?;
    let mut model = Model::build(spec, seed)?;
    if manifest != model.shape_manifest() {
        return Err(LabError::Contract(format!(
            "checkpoint manifest `{manifest}` does not match `{}`",
            model.shape_manifest()
        )));
    }
    let body = &bytes[nl + 1..];
    let expected = model.param_count() * 8;
    if body.len() != expected {
        return Err(LabError::Parse {
            line: 2,
            msg: format!("expected {expected} parameter bytes, found {}", body.len()),
        });
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for layer in model.layers_mut() {
        if let Some(a) = layer.affine_mut() {
            for v in a.weight.as_mut_slice().iter_mut().chain(a.bias.iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| LabError::io(path, e))
}

pub fn load(path: impl AsRef<Path>, spec: &ModelSpec, seed: u64) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    from_bytes(&bytes, spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::srcm::{HeadDesign, SrcmConfig};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_width: 5,
            hidden: vec![7, 6],
            activation: Activation::Tanh,
            dropout: 0.0,
            head: HeadDesign::Srcm,
            srcm: Some(SrcmConfig::new(1.0, 1.0, 4).unwrap()),
            num_classes: 3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Model::build(&spec(), 3).unwrap();
        let back = from_bytes(&to_bytes(&m), &spec(), 99).unwrap();
        assert_eq!(to_bytes(&back), to_bytes(&m));
        let x = crate::Matrix::from_vec(2, 5, (0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(m.predict_logits(&x).unwrap(), back.predict_logits(&x).unwrap());
    }

    #[test]
    fn mismatches_are_rejected() {
        let m = Model::build(&spec(), 3).unwrap();
        let bytes = to_bytes(&m);
        let mut other = spec();
        other.hidden = vec![7, 5];
        assert!(matches!(from_bytes(&bytes, &other, 0), Err(LabError::Contract(_))));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3], &spec(), 0),
            Err(LabError::Parse { .. })
        ));
        assert!(from_bytes(b"no newline", &spec(), 0).is_err());
    }
}
