//! Annulus projection of bottleneck features and the magnitude-normalized
//! classifier layer that keeps the projection meaningful.
//!
//! Two pieces cooperate here:
//!
//! * the ring activation ([`sr_forward`]) clamps every feature row's ℓ2 norm
//!   into `[r1, r1 + d]` while keeping its direction;
//! * [`linearnorm_forward`] divides the classifier weights by their Frobenius
//!   norm on the fly, so the classifier cannot undo the clamp by growing `W`.
//!
//! [`build_head`] wires them into one of four head layouts and
//! [`capacity_proxy`] gives the relative volume of the shell a head allows.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::{Layer, Mode};

/// Relative slack around both radii inside which a row counts as already in
/// the shell. A row projected onto a sphere can land one rounding step inside
/// it; without the slack a second pass would move it again.
const BOUNDARY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrcmConfig {
    /// Inner radius.
    pub r1: f64,
    /// Gap between the spheres, so the outer radius is `r1 + d`.
    pub d: f64,
    /// Keep weight normalization on at evaluation time.
    pub all_on: bool,
    /// Width of the extra dense layer feeding the ring activation.
    pub hidden_width: usize,
}

impl SrcmConfig {
    pub fn new(r1: f64, d: f64, hidden_width: usize) -> Result<Self> {
        let cfg = SrcmConfig {
            r1,
            d,
            all_on: true,
            hidden_width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r1.is_finite() && self.r1 > 0.0) {
            return Err(LabError::config("r1", format!("must be > 0, got {}", self.r1)));
        }
        if !(self.d.is_finite() && self.d > 0.0) {
            return Err(LabError::config("d", format!("must be > 0, got {}", self.d)));
        }
        if self.hidden_width == 0 {
            return Err(LabError::config("hidden_width", "must be positive"));
        }
        Ok(())
    }

    pub fn r2(&self) -> f64 {
        self.r1 + self.d
    }

    pub fn annulus(&self) -> Annulus {
        Annulus {
            inner: self.r1,
            outer: self.r2(),
        }
    }
}

/// The closed shell `inner ≤ ‖x‖ ≤ outer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub inner: f64,
    pub outer: f64,
}

impl Annulus {
    pub fn new(inner: f64, outer: f64) -> Result<Self> {
        if !(inner > 0.0 && outer > inner && outer.is_finite()) {
            return Err(LabError::Input(format!(
                "annulus needs 0 < inner < outer, got [{inner}, {outer}]"
            )));
        }
        Ok(Annulus { inner, outer })
    }

    /// Radius a row of norm `norm` is projected onto, or `None` when the row
    /// is kept as is (inside the shell, or the zero row).
    #[inline]
    fn binding_radius(&self, norm: f64) -> Option<f64> {
        if norm == 0.0 {
            None
        } else if norm < self.inner * (1.0 - BOUNDARY_SLACK) {
            Some(self.inner)
        } else if norm > self.outer * (1.0 + BOUNDARY_SLACK) {
            Some(self.outer)
        } else {
            None
        }
    }
}

#[inline]
fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(LabError::Numeric(format!("non-finite entry in {what}")))
    }
}

/// Projects each row into the shell. Rows inside are returned untouched; the
/// zero row maps to itself.
pub fn sr_forward(x: &Matrix, ring: &Annulus) -> Result<Matrix> {
    ensure_finite(x, "ring activation input")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = l2(row);
        if let Some(radius) = ring.binding_radius(norm) {
            let s = radius / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(out)
}

/// Exact Jacobian-vector product of [`sr_forward`] at `x`.
///
/// For a projected row with binding radius `r` the Jacobian is
/// `r (I/‖x‖ − x xᵀ/‖x‖³)`; it is symmetric, so the same expression maps the
/// upstream gradient back.
pub fn sr_backward(x: &Matrix, ring: &Annulus, upstream: &Matrix) -> Result<Matrix> {
    if x.shape() != upstream.shape() {
        return Err(LabError::State(format!(
            "ring activation cache {:?} vs upstream {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    ensure_finite(x, "ring activation input")?;
    ensure_finite(upstream, "ring activation upstream gradient")?;
    let mut out = upstream.clone();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let norm = l2(xr);
        let row = out.row_mut(r);
        if norm == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        if let Some(radius) = ring.binding_radius(norm) {
            let dot: f64 = xr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            let a = radius / norm;
            let c = radius * dot / (norm * norm * norm);
            for (g, &xi) in row.iter_mut().zip(xr) {
                *g = a * *g - c * xi;
            }
        }
    }
    Ok(out)
}

/// True when the weights are divided by their Frobenius norm for this pass.
#[inline]
pub fn normalizes(mode: Mode, all_on: bool) -> bool {
    mode == Mode::Train || all_on
}

fn frobenius_or_err(w: &Matrix) -> Result<f64> {
    let n = w.frobenius_norm();
    if n == 0.0 || !n.is_finite() {
        return Err(LabError::Numeric(format!(
            "classifier weight norm is {n}; cannot normalize"
        )));
    }
    Ok(n)
}

/// `g · (W/‖W‖_F) + b` when normalizing, `g · W + b` otherwise. `W` is left untouched.
pub fn linearnorm_forward(
    g: &Matrix,
    w: &Matrix,
    b: &[f64],
    mode: Mode,
    all_on: bool,
) -> Result<Matrix> {
    if g.cols() != w.rows() || b.len() != w.cols() {
        return Err(LabError::Input(format!(
            "linear-norm input {:?} against weight {:?} and bias {}",
            g.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut f = g.matmul(w)?;
    if normalizes(mode, all_on) {
        let norm = frobenius_or_err(w)?;
        f.as_mut_slice().iter_mut().for_each(|v| *v /= norm);
    }
    f.add_row_vector(b);
    Ok(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearNormGrads {
    pub dg: Matrix,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

/// Gradients of [`linearnorm_forward`]. In the normalizing branch `dW` carries
/// the full derivative of `W/‖W‖_F`, including the radial correction.
pub fn linearnorm_backward(
    g: &Matrix,
    w: &Matrix,
    upstream: &Matrix,
    mode: Mode,
    all_on: bool,
) -> Result<LinearNormGrads> {
    if g.rows() != upstream.rows() || g.cols() != w.rows() || upstream.cols() != w.cols() {
        return Err(LabError::State(format!(
            "linear-norm cache {:?}, weight {:?}, upstream {:?}",
            g.shape(),
            w.shape(),
            upstream.shape()
        )));
    }
    let db = upstream.col_sums();
    if !normalizes(mode, all_on) {
        return Ok(LinearNormGrads {
            dg: upstream.matmul_t(w)?,
            dw: g.t_matmul(upstream)?,
            db,
        });
    }
    let norm = frobenius_or_err(w)?;
    let w_hat = w.scale(1.0 / norm);
    let dw_hat = g.t_matmul(upstream)?;
    let radial: f64 = w_hat
        .as_slice()
        .iter()
        .zip(dw_hat.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    let mut dw = dw_hat;
    for (d, &wh) in dw.as_mut_slice().iter_mut().zip(w_hat.as_slice()) {
        *d = (*d - wh * radial) / norm;
    }
    Ok(LinearNormGrads {
        dg: upstream.matmul_t(&w_hat)?,
        dw,
        db,
    })
}

/// Relative capacity of an `n`-dimensional shell with inner radius `r1` and
/// gap `d`: `d · Σ_{i<n} r1^i (r1+d)^(n−1−i)`, i.e. `(r2^n − r1^n)` without
/// the dimension-dependent constant.
pub fn capacity_proxy(n: usize, r1: f64, d: f64) -> Result<f64> {
    if n == 0 {
        return Err(LabError::Input("capacity proxy needs n >= 1".into()));
    }
    if !(r1 > 0.0 && d > 0.0 && r1.is_finite() && d.is_finite()) {
        return Err(LabError::Input(format!(
            "capacity proxy needs r1 > 0 and d > 0, got r1={r1}, d={d}"
        )));
    }
    let r2 = r1 + d;
    // Horner in r2 with coefficients r1^i: s <- s*r2 + r1^i
    let mut sum = 0.0;
    let mut r1_pow = 1.0;
    for _ in 0..n {
        sum = sum * r2 + r1_pow;
        r1_pow *= r1;
        if !sum.is_finite() {
            break;
        }
    }
    let value = d * sum;
    if !value.is_finite() {
        return Err(LabError::Numeric(format!(
            "capacity proxy overflows for n={n}, r1={r1}, d={d}"
        )));
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadDesign {
    /// Plain dense classifier.
    Vanilla,
    /// Dense classifier with the ring activation applied to its logits.
    DesignA,
    /// Dense → ring → linear-norm, plain weights at evaluation.
    DesignB,
    /// Dense → ring → linear-norm, normalized weights in every mode.
    Srcm,
}

impl HeadDesign {
    pub const ALL: [HeadDesign; 4] = [
        HeadDesign::Vanilla,
        HeadDesign::DesignA,
        HeadDesign::DesignB,
        HeadDesign::Srcm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadDesign::Vanilla => "vanilla",
            HeadDesign::DesignA => "design_a",
            HeadDesign::DesignB => "design_b",
            HeadDesign::Srcm => "srcm",
        }
    }

    pub fn uses_ring(&self) -> bool {
        !matches!(self, HeadDesign::Vanilla)
    }

    /// Whether the bottleneck handed to the classifier is already projected.
    pub fn projects_bottleneck(&self) -> bool {
        matches!(self, HeadDesign::DesignB | HeadDesign::Srcm)
    }
}

impl fmt::Display for HeadDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadDesign {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" => Ok(HeadDesign::Vanilla),
            "design_a" | "a" => Ok(HeadDesign::DesignA),
            "design_b" | "b" => Ok(HeadDesign::DesignB),
            "srcm" => Ok(HeadDesign::Srcm),
            other => Err(LabError::config(
                "head",
                format!("unknown head design `{other}` (vanilla, design_a, design_b, srcm)"),
            )),
        }
    }
}

/// Builds the classifier head on top of a `bottleneck_width` representation.
///
/// `cfg` is required for every design except `Vanilla`. The layout fixes
/// `all_on`: `DesignB` evaluates with plain weights, `Srcm` keeps them
/// normalized.
pub fn build_head<R: Rng + ?Sized>(
    design: HeadDesign,
    bottleneck_width: usize,
    num_classes: usize,
    cfg: Option<&SrcmConfig>,
    rng: &mut R,
) -> Result<Vec<Layer>> {
    if bottleneck_width == 0 || num_classes == 0 {
        return Err(LabError::config("model", "head widths must be positive"));
    }
    let ring_cfg = || {
        let cfg = cfg.ok_or_else(|| {
            LabError::config("r1", format!("head `{design}` needs ring radii"))
        })?;
        cfg.validate()?;
        Ok::<_, LabError>(cfg)
    };
    let layers = match design {
        HeadDesign::Vanilla => vec![Layer::dense(bottleneck_width, num_classes, rng)],
        HeadDesign::DesignA => {
            let cfg = ring_cfg()?;
            vec![
                Layer::dense(bottleneck_width, num_classes, rng),
                Layer::Ring(cfg.annulus()),
            ]
        }
        HeadDesign::DesignB | HeadDesign::Srcm => {
            let cfg = ring_cfg()?;
            let all_on = design == HeadDesign::Srcm;
            vec![
                Layer::dense(bottleneck_width, cfg.hidden_width, rng),
                Layer::Ring(cfg.annulus()),
                Layer::linear_norm(cfg.hidden_width, num_classes, all_on, rng),
            ]
        }
    };
    Ok(layers)
}
