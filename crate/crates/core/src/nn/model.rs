use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::layer::{Affine, AffineGrad, Layer};
use crate::nn::{Activation, Mode};
use crate::srcm::{build_head, HeadDesign, SrcmConfig};

/// Architecture of an MLP with one of the classifier heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Dropout after each hidden activation; 0 disables it.
    pub dropout: f64,
    pub head: HeadDesign,
    pub srcm: Option<SrcmConfig>,
    pub num_classes: usize,
}

/// Whether the recorded bottleneck magnitude is taken before or after the ring projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeSource {
    PreProjection,
    PostProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_width: usize,
    /// Index into the activation list (0 = input) of the representation `g`.
    bottleneck: usize,
    head: HeadDesign,
    seed: u64,
    pub mode: Mode,
}

/// Activations of one forward pass; consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    acts: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
    mode: Mode,
    bottleneck: usize,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("input is always cached")
    }

    pub fn bottleneck(&self) -> &Matrix {
        &self.acts[self.bottleneck]
    }

    pub fn input(&self) -> &Matrix {
        &self.acts[0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn into_logits(mut self) -> Matrix {
        self.acts.pop().expect("input is always cached")
    }
}

/// One optional gradient per layer, `Some` exactly for parameterized layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Option<AffineGrad>>);

impl Grads {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(AffineGrad::is_finite)
    }
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        if spec.input_width == 0 || spec.num_classes == 0 || spec.hidden.contains(&0) {
            return Err(LabError::config("hidden", "all widths must be positive"));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(LabError::config("dropout", "must be in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut width = spec.input_width;
        for &h in &spec.hidden {
            layers.push(Layer::dense(width, h, &mut rng));
            layers.push(spec.activation.layer());
            if spec.dropout > 0.0 {
                layers.push(Layer::Dropout { rate: spec.dropout });
            }
            width = h;
        }
        let body = layers.len();
        let head = build_head(spec.head, width, spec.num_classes, spec.srcm.as_ref(), &mut rng)?;
        layers.extend(head);
        let bottleneck = if spec.head.projects_bottleneck() {
            body + 2
        } else {
            body
        };
        Model::from_layers(spec.input_width, layers, bottleneck, spec.head, seed)
    }

    /// Assembles a model from explicit layers; `bottleneck` indexes the
    /// activation list where 0 is the input and `i + 1` the output of layer `i`.
    pub fn from_layers(
        input_width: usize,
        layers: Vec<Layer>,
        bottleneck: usize,
        head: HeadDesign,
        seed: u64,
    ) -> Result<Model> {
        let mut width = input_width;
        for (i, layer) in layers.iter().enumerate() {
            width = layer.out_width(width).ok_or_else(|| LabError::Shape {
                layer: i,
                msg: format!("{} layer cannot take input width {width}", layer.name()),
            })?;
        }
        if bottleneck > layers.len() {
            return Err(LabError::Input(format!(
                "bottleneck index {bottleneck} beyond {} layers",
                layers.len()
            )));
        }
        Ok(Model {
            layers,
            input_width,
            bottleneck,
            head,
            seed,
            mode: Mode::Train,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .iter()
            .fold(self.input_width, |w, l| l.out_width(w).unwrap_or(w))
    }

    pub fn head(&self) -> HeadDesign {
        self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn magnitude_source(&self) -> MagnitudeSource {
        if self.head.projects_bottleneck() {
            MagnitudeSource::PostProjection
        } else {
            MagnitudeSource::PreProjection
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::affine).map(Affine::param_count).sum()
    }

    /// Forward pass in the model's current mode. Training-mode dropout needs
    /// [`Model::forward_with`] and an rng.
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardPass> {
        self.forward_with(batch, self.mode, None)
    }

    pub fn forward_with(
        &self,
        batch: &Matrix,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        if batch.cols() != self.input_width {
            return Err(LabError::Shape {
                layer: 0,
                msg: format!(
                    "batch has {} columns, model expects {}",
                    batch.cols(),
                    self.input_width
                ),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, mask) = layer
                .forward(&acts[i], mode, rng.as_deref_mut())
                .map_err(|e| match e {
                    LabError::Input(msg) => LabError::Shape { layer: i, msg },
                    other => other,
                })?;
            acts.push(out);
            masks.push(mask);
        }
        Ok(ForwardPass {
            acts,
            masks,
            mode,
            bottleneck: self.bottleneck,
        })
    }

    /// Evaluation-mode logits, computed in row chunks to bound memory.
    pub fn predict_logits(&self, x: &Matrix) -> Result<Matrix> {
        const CHUNK: usize = 512;
        let mut data = Vec::with_capacity(x.rows() * self.output_width());
        let mut cols = self.output_width();
        let idx: Vec<usize> = (0..x.rows()).collect();
        for chunk in idx.chunks(CHUNK) {
            let pass = self.forward_with(&x.select_rows(chunk), Mode::Eval, None)?;
            let logits = pass.into_logits();
            cols = logits.cols();
            data.extend_from_slice(logits.as_slice());
        }
        Matrix::from_vec(x.rows(), cols, data)
    }

    /// Backpropagates `dlogits` through the cached pass. Returns one gradient
    /// per parameterized layer and, if requested, the gradient with respect
    /// to the batch.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dlogits: &Matrix,
        want_input_grad: bool,
    ) -> Result<(Grads, Option<Matrix>)> {
        self.check_cache(pass, dlogits)?;
        let n = self.layers.len();
        let mut grads: Vec<Option<AffineGrad>> = vec![None; n];
        let mut upstream = dlogits.clone();
        let mut input_grad = None;
        for i in (0..n).rev() {
            let need_dx = i > 0 || want_input_grad;
            let (dx, grad) = self.layers[i].backward(
                &pass.acts[i],
                &pass.acts[i + 1],
                pass.masks[i].as_ref(),
                &upstream,
                pass.mode,
                need_dx,
            )?;
            grads[i] = grad;
            match dx {
                Some(dx) if i > 0 => upstream = dx,
                Some(dx) => input_grad = want_input_grad.then_some(dx),
                None => {}
            }
        }
        Ok((Grads(grads), input_grad))
    }

    fn check_cache(&self, pass: &ForwardPass, dlogits: &Matrix) -> Result<()> {
        if pass.acts.len() != self.layers.len() + 1 || pass.masks.len() != self.layers.len() {
            return Err(LabError::State(format!(
                "cache holds {} activations for a {}-layer model",
                pass.acts.len(),
                self.layers.len()
            )));
        }
        let rows = pass.acts[0].rows();
        let mut width = self.input_width;
        for (i, act) in pass.acts.iter().enumerate() {
            if act.shape() != (rows, width) {
                return Err(LabError::State(format!(
                    "cached activation {i} is {:?}, expected ({rows}, {width})",
                    act.shape()
                )));
            }
            if let Some(layer) = self.layers.get(i) {
                width = layer.out_width(width).unwrap_or(width);
            }
        }
        if dlogits.shape() != pass.logits().shape() {
            return Err(LabError::State(format!(
                "dlogits {:?} vs cached logits {:?}",
                dlogits.shape(),
                pass.logits().shape()
            )));
        }
        Ok(())
    }

    /// Zero-filled buffers mirroring every parameter tensor.
    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.layers
                .iter()
                .map(|l| l.affine().map(Affine::zeros_like))
                .collect(),
        )
    }

    /// One line describing the parameter layout, used as checkpoint header.
    pub fn shape_manifest(&self) -> String {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(a) => format!("dense:{}x{}", a.in_width(), a.out_width()),
                Layer::LinearNorm { affine, all_on } => format!(
                    "linear_norm:{}x{}:{}",
                    affine.in_width(),
                    affine.out_width(),
                    if *all_on { "all_on" } else { "train_only" }
                ),
                Layer::Dropout { rate } => format!("dropout:{rate}"),
                Layer::Ring(r) => format!("ring:{}:{}", r.inner, r.outer),
                other => other.name().to_string(),
            })
            .collect();
        format!("in={} {}", self.input_width, parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srcm::Annulus;

    fn dense(w: Vec<Vec<f64>>, b: Vec<f64>) -> Layer {
        Layer::Dense(Affine {
            weight: Matrix::from_rows(&w).unwrap(),
            bias: b,
        })
    }

    #[test]
    fn identity_dense_forward() {
        let m = Model::from_layers(
            2,
            vec![dense(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])],
            0,
            HeadDesign::Vanilla,
            0,
        )
        .unwrap();
        let pass = m.forward(&Matrix::row_vector(&[2.0, 3.0])).unwrap();
        assert_eq!(pass.logits().as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn dot_product_forward() {
        let m = Model::from_layers(
            2,
            vec![dense(vec![vec![1.0], vec![1.0]], vec![0.5])],
            0,
            HeadDesign::Vanilla,
            0,
        )
        .unwrap();
        let pass = m.forward(&Matrix::row_vector(&[1.0, 1.0])).unwrap();
        assert_eq!(pass.logits().as_slice(), &[2.5]);
    }

    #[test]
    fn purchase_mlp_shapes() {
        let spec = ModelSpec {
            input_width: 600,
            hidden: vec![1024, 512, 256],
            activation: Activation::Tanh,
            dropout: 0.0,
            head: HeadDesign::Vanilla,
            srcm: None,
            num_classes: 100,
        };
        let m = Model::build(&spec, 0).unwrap();
        let x = Matrix::from_vec(8, 600, (0..4800).map(|i| (i % 2) as f64).collect()).unwrap();
        let pass = m.forward(&x).unwrap();
        assert_eq!(pass.logits().shape(), (8, 100));
        assert_eq!(pass.bottleneck().shape(), (8, 256));
    }

    #[test]
    fn srcm_bottleneck_is_projected() {
        let spec = ModelSpec {
            input_width: 6,
            hidden: vec![5],
            activation: Activation::Tanh,
            dropout: 0.0,
            head: HeadDesign::Srcm,
            srcm: Some(SrcmConfig::new(2.0, 1.0, 4).unwrap()),
            num_classes: 3,
        };
        let m = Model::build(&spec, 3).unwrap();
        assert_eq!(m.magnitude_source(), MagnitudeSource::PostProjection);
        let x = Matrix::from_vec(4, 6, (0..24).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let pass = m.forward(&x).unwrap();
        assert_eq!(pass.bottleneck().shape(), (4, 4));
        for r in pass.bottleneck().row_iter() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((2.0 - 1e-9..=3.0 + 1e-9).contains(&n));
        }
    }

    #[test]
    fn mismatched_batch_names_layer_zero() {
        let m = Model::from_layers(
            2,
            vec![dense(vec![vec![1.0], vec![1.0]], vec![0.5])],
            0,
            HeadDesign::Vanilla,
            0,
        )
        .unwrap();
        let err = m.forward(&Matrix::row_vector(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, LabError::Shape { layer: 0, .. }));
    }

    #[test]
    fn incompatible_stack_names_offending_layer() {
        let layers = vec![
            dense(vec![vec![1.0, 0.0]], vec![0.0, 0.0]),
            Layer::Tanh,
            dense(vec![vec![1.0]; 3], vec![0.0]),
        ];
        let err = Model::from_layers(1, layers, 0, HeadDesign::Vanilla, 0).unwrap_err();
        assert!(matches!(err, LabError::Shape { layer: 2, .. }));
    }

    #[test]
    fn single_dense_backward_is_outer_product() {
        let m = Model::from_layers(
            2,
            vec![dense(vec![vec![0.3], vec![-0.2]], vec![0.1])],
            0,
            HeadDesign::Vanilla,
            0,
        )
        .unwrap();
        let pass = m.forward(&Matrix::row_vector(&[1.0, 2.0])).unwrap();
        let (grads, dx) = m.backward(&pass, &Matrix::row_vector(&[1.0]), true).unwrap();
        let g = grads.0[0].as_ref().unwrap();
        assert_eq!(g.weight.as_slice(), &[1.0, 2.0]);
        assert_eq!(g.bias, vec![1.0]);
        assert_eq!(dx.unwrap().as_slice(), &[0.3, -0.2]);

        let (grads, dx) = m.backward(&pass, &Matrix::row_vector(&[0.0]), false).unwrap();
        assert!(dx.is_none());
        let g = grads.0[0].as_ref().unwrap();
        assert!(g.weight.as_slice().iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_state_error() {
        let a = Model::from_layers(
            2,
            vec![dense(vec![vec![1.0], vec![1.0]], vec![0.0])],
            0,
            HeadDesign::Vanilla,
            0,
        )
        .unwrap();
        let b = Model::from_layers(
            2,
            vec![dense(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![0.0, 0.0]), Layer::Tanh],
            0,
            HeadDesign::Vanilla,
            0,
        )
        .unwrap();
        let pass = a.forward(&Matrix::row_vector(&[1.0, 2.0])).unwrap();
        let err = b.backward(&pass, &Matrix::row_vector(&[1.0]), false).unwrap_err();
        assert!(matches!(err, LabError::State(_)));
        let err = a.backward(&pass, &Matrix::row_vector(&[1.0, 2.0]), false).unwrap_err();
        assert!(matches!(err, LabError::State(_)));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let m = Model::from_layers(
            3,
            vec![Layer::Dropout { rate: 0.7 }, Layer::Ring(Annulus::new(1.0, 2.0).unwrap())],
            0,
            HeadDesign::Vanilla,
            0,
        )
        .unwrap();
        let x = Matrix::row_vector(&[0.5, -1.0, 0.25]);
        let pass = m.forward_with(&x, Mode::Eval, None).unwrap();
        assert_eq!(pass.acts[1], x);
        assert!(m.forward_with(&x, Mode::Train, None).is_err());
    }
}
