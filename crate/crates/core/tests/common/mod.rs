//! Finite-difference helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use srcm_lab::nn::{Layer, Model, Mode};
use srcm_lab::srcm::HeadDesign;
use srcm_lab::Matrix;

pub const STEP: f64 = 1e-6;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over flattened values.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central differences of a scalar function of a vector.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + STEP;
            let up = f(&work);
            work[i] = x[i] - STEP;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between the analytic and numeric gradients of
/// `L = Σ c ⊙ layer(x)` over input, weights and bias of a single-layer model.
pub fn check_layer(layer: Layer, x: &Matrix, mode: Mode, rng: &mut ChaCha8Rng) -> f64 {
    let mut model = Model::from_layers(x.cols(), vec![layer], 0, HeadDesign::Vanilla, 0).unwrap();
    model.set_mode(mode);
    let pass = model.forward(x).unwrap();
    let c = random_matrix(rng, pass.logits().rows(), pass.logits().cols(), 1.0);
    let (grads, dx) = model.backward(&pass, &c, true).unwrap();
    let objective = |m: &Model, input: &Matrix| dot(m.forward(input).unwrap().logits(), &c);

    let num_dx = numeric_grad(x.as_slice(), |v| {
        objective(&model, &Matrix::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap())
    });
    let mut worst = rel_err(dx.unwrap().as_slice(), &num_dx);

    if let Some(g) = &grads.0[0] {
        let w0 = model.layers()[0].affine().unwrap().weight.as_slice().to_vec();
        let num_dw = numeric_grad(&w0, |v| {
            let mut m = model.clone();
            m.layers_mut()[0].affine_mut().unwrap().weight.as_mut_slice().copy_from_slice(v);
            objective(&m, x)
        });
        worst = worst.max(rel_err(g.weight.as_slice(), &num_dw));
        let b0 = model.layers()[0].affine().unwrap().bias.clone();
        let num_db = numeric_grad(&b0, |v| {
            let mut m = model.clone();
            m.layers_mut()[0].affine_mut().unwrap().bias.copy_from_slice(v);
            objective(&m, x)
        });
        worst = worst.max(rel_err(&g.bias, &num_db));
    }
    worst
}

/// Rows with norms drawn from `[lo, hi]`, directions uniform on the sphere.
pub fn rows_with_norms(rng: &mut ChaCha8Rng, rows: usize, dim: usize, lo: f64, hi: f64) -> Matrix {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = rng.gen_range(lo..hi);
        data.extend(v.iter().map(|x| x * target / n));
    }
    Matrix::from_vec(rows, dim, data).unwrap()
}
