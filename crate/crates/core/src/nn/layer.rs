use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::Mode;
use crate::srcm::{linearnorm_backward, linearnorm_forward, sr_backward, sr_forward, Annulus};

/// Weight (`in × out`) and bias (`out`) of an affine map `x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Affine {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn zeros_like(&self) -> AffineGrad {
        AffineGrad {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Gradient (or momentum buffer) with the shape of an [`Affine`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineGrad {
    pub fn matches(&self, a: &Affine) -> bool {
        self.weight.shape() == a.weight.shape() && self.bias.len() == a.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(Affine),
    Tanh,
    Relu,
    /// Inverted dropout: scaled by `1/(1-rate)` in training, identity in evaluation.
    Dropout { rate: f64 },
    /// Ring activation projecting rows into an annulus.
    Ring(Annulus),
    /// Classifier whose weights are Frobenius-normalized in training, and also
    /// in evaluation when `all_on` is set.
    LinearNorm { affine: Affine, all_on: bool },
}

impl Layer {
    pub fn dense<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Layer::Dense(Affine::glorot(input, output, rng))
    }

    pub fn linear_norm<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        all_on: bool,
        rng: &mut R,
    ) -> Self {
        Layer::LinearNorm {
            affine: Affine::glorot(input, output, rng),
            all_on,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Tanh => "tanh",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::Ring(_) => "ring",
            Layer::LinearNorm { .. } => "linear_norm",
        }
    }

    pub fn affine(&self) -> Option<&Affine> {
        match self {
            Layer::Dense(a) | Layer::LinearNorm { affine: a, .. } => Some(a),
            _ => None,
        }
    }

    pub fn affine_mut(&mut self) -> Option<&mut Affine> {
        match self {
            Layer::Dense(a) | Layer::LinearNorm { affine: a, .. } => Some(a),
            _ => None,
        }
    }

    /// Output width for an input of width `input`, or `None` if incompatible.
    pub fn out_width(&self, input: usize) -> Option<usize> {
        match self.affine() {
            Some(a) if a.in_width() == input => Some(a.out_width()),
            Some(_) => None,
            None => Some(input),
        }
    }

    /// Returns the output and, for dropout in training, the scaled keep mask.
    pub(crate) fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix, Option<Matrix>)> {
        let out = match self {
            Layer::Dense(a) => {
                let mut y = x.matmul(&a.weight)?;
                y.add_row_vector(&a.bias);
                y
            }
            Layer::Tanh => x.map(f64::tanh),
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::Dropout { rate } => {
                if mode == Mode::Eval || *rate == 0.0 {
                    x.clone()
                } else {
                    let rng = rng.ok_or_else(|| {
                        LabError::State("dropout in training mode needs a mask rng".into())
                    })?;
                    let keep = 1.0 - rate;
                    let scale = 1.0 / keep;
                    let mask_data = (0..x.rows() * x.cols())
                        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                        .collect();
                    let mask = Matrix::from_vec(x.rows(), x.cols(), mask_data)?;
                    let mut y = x.clone();
                    for (v, m) in y.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *v *= m;
                    }
                    return Ok((y, Some(mask)));
                }
            }
            Layer::Ring(ring) => sr_forward(x, ring)?,
            Layer::LinearNorm { affine, all_on } => {
                linearnorm_forward(x, &affine.weight, &affine.bias, mode, *all_on)?
            }
        };
        Ok((out, None))
    }

    /// Maps the upstream gradient back through the layer. `dx` is skipped
    /// (returned as `None`) when `need_dx` is false.
    pub(crate) fn backward(
        &self,
        input: &Matrix,
        output: &Matrix,
        mask: Option<&Matrix>,
        upstream: &Matrix,
        mode: Mode,
        need_dx: bool,
    ) -> Result<(Option<Matrix>, Option<AffineGrad>)> {
        match self {
            Layer::Dense(a) => {
                let grad = AffineGrad {
                    weight: input.t_matmul(upstream)?,
                    bias: upstream.col_sums(),
                };
                let dx = if need_dx {
                    Some(upstream.matmul_t(&a.weight)?)
                } else {
                    None
                };
                Ok((dx, Some(grad)))
            }
            Layer::Tanh => {
                let mut dx = upstream.clone();
                for (g, &y) in dx.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    *g *= 1.0 - y * y;
                }
                Ok((Some(dx), None))
            }
            Layer::Relu => {
                let mut dx = upstream.clone();
                for (g, &x) in dx.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok((Some(dx), None))
            }
            Layer::Dropout { .. } => {
                let mut dx = upstream.clone();
                if let Some(mask) = mask {
                    for (g, m) in dx.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *g *= m;
                    }
                }
                Ok((Some(dx), None))
            }
            Layer::Ring(ring) => Ok((Some(sr_backward(input, ring, upstream)?), None)),
            Layer::LinearNorm { affine, all_on } => {
                let g = linearnorm_backward(input, &affine.weight, upstream, mode, *all_on)?;
                let grad = AffineGrad {
                    weight: g.dw,
                    bias: g.db,
                };
                Ok((need_dx.then_some(g.dg), Some(grad)))
            }
        }
    }
}
