//! Small MLP encoder plus affine classifier, with exact reverse-mode
//! gradients and an SGD-with-momentum optimizer.
//!
//! The encoder applies ReLU between its layers but not after the last one,
//! so the embedding is a linear image of the previous activation. The
//! classifier is a single affine layer on top of the embedding and never
//! applies an activation; all probability computation lives in the loss
//! layer.

use serde::{Deserialize, Serialize};

use crate::numerics::{Mat, RngStream};

#[derive(Debug)]
pub enum ModelError {
    InvalidDims(String),
    DimensionMismatch { expected: usize, got: usize },
    NonFiniteGradient,
    Serde(String),
    Io(std::io::Error),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::InvalidDims(msg) => write!(f, "invalid layer dims: {msg}"),
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            ModelError::NonFiniteGradient => write!(f, "non-finite gradient"),
            ModelError::Serde(msg) => write!(f, "model serialization: {msg}"),
            ModelError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

/// One affine layer: `y = x W^T + b` with `W` stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// All trainable parameters. The last layer is the classifier; everything
/// before it is the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
    encoder_depth: usize,
}

impl ModelParams {
    /// Assemble a model from explicit layers. The last layer is the
    /// classifier; consecutive dimensions must chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<ModelParams, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::InvalidDims("need at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].weight.cols() != w[0].weight.rows() {
                return Err(ModelError::InvalidDims(format!(
                    "layer output {} does not feed layer input {}",
                    w[0].weight.rows(),
                    w[1].weight.cols()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.rows() {
                return Err(ModelError::InvalidDims("bias length must match weight rows".into()));
            }
        }
        let encoder_depth = layers.len() - 1;
        Ok(ModelParams { layers, encoder_depth })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn encoder_depth(&self) -> usize {
        self.encoder_depth
    }

    pub fn classifier(&self) -> &Layer {
        &self.layers[self.encoder_depth]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn embed_dim(&self) -> usize {
        if self.encoder_depth == 0 {
            self.input_dim()
        } else {
            self.layers[self.encoder_depth - 1].weight.rows()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims
    }

    /// Replace the classifier layer (used by decoupled head retraining).
    pub fn set_classifier(&mut self, layer: Layer) {
        assert_eq!(layer.weight.cols(), self.embed_dim());
        let depth = self.encoder_depth;
        self.layers[depth] = layer;
    }

    /// FNV-1a hash over the exact bit patterns of every parameter, in a
    /// fixed order. Two models compare bitwise-equal iff their checksums and
    /// shapes agree.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for l in &self.layers {
            for v in l.weight.data() {
                eat(v.to_bits());
            }
            for v in &l.bias {
                eat(v.to_bits());
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform initialization: weights from uniform(-a, a) with
/// `a = sqrt(6 / (fan_in + fan_out))`, biases zero. Weight entries are drawn
/// row-major, layer by layer.
pub fn init_params(layer_dims: &[usize], seed: u64) -> Result<ModelParams, ModelError> {
    if layer_dims.len() < 2 {
        return Err(ModelError::InvalidDims("need at least input and output dims".into()));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(ModelError::InvalidDims("layer dims must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    let mut layers = Vec::with_capacity(layer_dims.len() - 1);
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Mat::from_fn(fan_out, fan_in, |_, _| a * (2.0 * rng.next_uniform() - 1.0));
        layers.push(Layer { weight, bias: vec![0.0; fan_out] });
    }
    let encoder_depth = layers.len() - 1;
    Ok(ModelParams { layers, encoder_depth })
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Mat,
    /// Pre-activation of every layer.
    pre: Vec<Mat>,
    /// Post-activation of every layer (identical to `pre` where no ReLU
    /// applies).
    act: Vec<Mat>,
    encoder_depth: usize,
}

impl ForwardCache {
    pub fn logits(&self) -> &Mat {
        self.act.last().unwrap()
    }

    pub fn embeddings(&self) -> &Mat {
        if self.encoder_depth == 0 {
            &self.input
        } else {
            &self.act[self.encoder_depth - 1]
        }
    }

    pub fn batch_len(&self) -> usize {
        self.input.rows()
    }
}

fn relu(m: &Mat) -> Mat {
    let mut out = m.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn affine(x: &Mat, layer: &Layer) -> Mat {
    let mut out = x.matmul_transpose_b(&layer.weight);
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += *b;
        }
    }
    out
}

/// Forward pass over a feature matrix (rows are samples).
pub fn forward(params: &ModelParams, features: &Mat) -> Result<ForwardCache, ModelError> {
    if features.cols() != params.input_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: params.input_dim(),
            got: features.cols(),
        });
    }
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut act = Vec::with_capacity(n_layers);
    let mut cur = features.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let p = affine(&cur, layer);
        // ReLU only between encoder layers
        let a = if l + 1 < params.encoder_depth { relu(&p) } else { p.clone() };
        cur = a.clone();
        pre.push(p);
        act.push(a);
    }
    Ok(ForwardCache { input: features.clone(), pre, act, encoder_depth: params.encoder_depth })
}

/// Parameter gradients, mirroring the layer layout of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Exact reverse-mode gradients for a loss with two upstream paths: one
/// through the logits and an optional one injected directly at the
/// embedding. Both are accumulated where the paths merge.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dl_dlogits: &Mat,
    dl_dz: Option<&Mat>,
) -> Result<Gradients, ModelError> {
    let n = cache.batch_len();
    if dl_dlogits.rows() != n || dl_dlogits.cols() != params.num_classes() {
        return Err(ModelError::DimensionMismatch {
            expected: n * params.num_classes(),
            got: dl_dlogits.rows() * dl_dlogits.cols(),
        });
    }
    if let Some(dz) = dl_dz {
        if dz.rows() != n || dz.cols() != params.embed_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: n * params.embed_dim(),
                got: dz.rows() * dz.cols(),
            });
        }
    }
    let n_layers = params.layers.len();
    let mut grads: Vec<Option<Layer>> = vec![None; n_layers];
    let mut upstream = dl_dlogits.clone();
    for l in (0..n_layers).rev() {
        // d pre = d act, masked by the ReLU where one was applied
        let mut dpre = upstream;
        if l + 1 < params.encoder_depth {
            let pre = &cache.pre[l];
            for (g, p) in dpre.data_mut().iter_mut().zip(pre.data()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = if l == 0 { &cache.input } else { &cache.act[l - 1] };
        let dw = dpre.matmul_transpose_a(input);
        let db = dpre.column_sums();
        upstream = dpre.matmul(&params.layers[l].weight);
        // the embedding boundary sits between the classifier and the encoder
        if l == params.encoder_depth {
            if let Some(dz) = dl_dz {
                upstream.add_assign(dz);
            }
        }
        grads[l] = Some(Layer { weight: dw, bias: db });
    }
    Ok(Gradients { layers: grads.into_iter().map(Option::unwrap).collect() })
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Layer>,
}

impl SgdState {
    pub fn zeros_like(params: &ModelParams) -> SgdState {
        SgdState {
            velocity: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

/// `v <- momentum v + g; p <- p - lr v` over every layer.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<(), ModelError> {
    sgd_step_layers(params, grads, lr, momentum, state, 0)
}

/// Same update restricted to layers at or above `from_layer`; layers below
/// are left bitwise untouched. Used for frozen-encoder head training.
pub fn sgd_step_layers(
    params: &mut ModelParams,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
    from_layer: usize,
) -> Result<(), ModelError> {
    assert!(lr > 0.0, "learning rate must be positive");
    assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
    if !grads.is_finite() {
        return Err(ModelError::NonFiniteGradient);
    }
    for l in from_layer..params.layers.len() {
        let (p, g, v) = (&mut params.layers[l], &grads.layers[l], &mut state.velocity[l]);
        for (vw, gw) in v.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *vw = momentum * *vw + gw;
        }
        for (pw, vw) in p.weight.data_mut().iter_mut().zip(v.weight.data()) {
            *pw -= lr * vw;
        }
        for (vb, gb) in v.bias.iter_mut().zip(&g.bias) {
            *vb = momentum * *vb + gb;
        }
        for (pb, vb) in p.bias.iter_mut().zip(&v.bias) {
            *pb -= lr * vb;
        }
    }
    Ok(())
}

/// On-disk model schema.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    encoder_depth: usize,
    metadata: ModelMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub seed: u64,
    pub config_hash: String,
}

pub fn model_to_json(params: &ModelParams, meta: &ModelMeta) -> String {
    let file = ModelFile {
        layer_dims: params.layer_dims(),
        weights: params.layers.iter().map(|l| l.weight.data().to_vec()).collect(),
        biases: params.layers.iter().map(|l| l.bias.clone()).collect(),
        encoder_depth: params.encoder_depth,
        metadata: meta.clone(),
    };
    serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
}

pub fn model_from_json(text: &str) -> Result<(ModelParams, ModelMeta), ModelError> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Serde(e.to_string()))?;
    if file.layer_dims.len() < 2 {
        return Err(ModelError::Serde("layer_dims too short".into()));
    }
    let n_layers = file.layer_dims.len() - 1;
    if file.weights.len() != n_layers || file.biases.len() != n_layers {
        return Err(ModelError::Serde("layer count mismatch".into()));
    }
    if file.encoder_depth + 1 != n_layers {
        return Err(ModelError::Serde("encoder_depth must equal layer count - 1".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (rows, cols) = (file.layer_dims[l + 1], file.layer_dims[l]);
        if file.weights[l].len() != rows * cols || file.biases[l].len() != rows {
            return Err(ModelError::Serde(format!("layer {l} has wrong shape")));
        }
        layers.push(Layer {
            weight: Mat::from_vec(rows, cols, file.weights[l].clone()),
            bias: file.biases[l].clone(),
        });
    }
    Ok((ModelParams { layers, encoder_depth: file.encoder_depth }, file.metadata))
}

pub fn save_model(path: &std::path::Path, params: &ModelParams, meta: &ModelMeta) -> Result<(), ModelError> {
    std::fs::write(path, model_to_json(params, meta))?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<(ModelParams, ModelMeta), ModelError> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}
