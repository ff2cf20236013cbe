//! The semantic and language extraction networks, the two classifier heads,
//! gradient reversal, and the checkpoint document.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::numerics::{affine_backward, affine_forward, Activation, Matrix};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// A feed-forward network; `activation` follows every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Per-layer inputs and hidden pre-activations saved by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl MlpParams {
    /// A single linear layer.
    pub fn linear(weight: Matrix, bias: Vec<f64>) -> Self {
        Self {
            layers: vec![Layer { weight, bias }],
            activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(format!("{name} has no layers")));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.cols() {
                return Err(Error::dim(
                    "MlpParams",
                    format!("{name}.layers[{k}].weight {}", layer.weight.shape_str()),
                    format!("bias[{}]", layer.bias.len()),
                ));
            }
            if let Some(next) = self.layers.get(k + 1) {
                if next.weight.rows() != layer.weight.cols() {
                    return Err(Error::dim(
                        "MlpParams",
                        format!("{name}.layers[{k}] {}", layer.weight.shape_str()),
                        format!("{name}.layers[{}] {}", k + 1, next.weight.shape_str()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpTrace)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = affine_forward(&h, &layer.weight, &layer.bias)?;
            inputs.push(h);
            if k < last {
                h = self.activation.forward(&z);
                pre_activations.push(z);
            } else {
                h = z;
            }
        }
        Ok((
            h,
            MlpTrace {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Backpropagate `dy` through the trace, accumulating into `grads`.
    /// Returns the gradient w.r.t. the network input.
    pub fn backward(&self, trace: &MlpTrace, dy: &Matrix, grads: &mut MlpParams) -> Result<Matrix> {
        let mut g = dy.clone();
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                g = self.activation.backward(&trace.pre_activations[k], &g)?;
            }
            let layer = &self.layers[k];
            let ag = affine_backward(&trace.inputs[k], &layer.weight, &g)?;
            let slot = &mut grads.layers[k];
            slot.weight.add_assign(&ag.dw)?;
            for (b, db) in slot.bias.iter_mut().zip(&ag.dbias) {
                *b += db;
            }
            g = ag.dx;
        }
        Ok(g)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn languages(&self) -> usize {
        self.weight.cols()
    }

    pub fn zeros(d: usize, languages: usize) -> Self {
        Self {
            weight: Matrix::zeros(d, languages),
            bias: vec![0.0; languages],
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.rows(), self.weight.cols())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mlp_m: MlpParams,
    pub mlp_l: MlpParams,
    /// Classifies language embeddings.
    pub lang_head: ClassifierHead,
    /// Classifies semantic embeddings behind gradient reversal.
    pub adv_head: ClassifierHead,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.mlp_m.input_dim()
    }

    pub fn languages(&self) -> usize {
        self.lang_head.languages()
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp_m.validate("mlp_m")?;
        self.mlp_l.validate("mlp_l")?;
        let d = self.dim();
        for (name, mlp) in [("mlp_m", &self.mlp_m), ("mlp_l", &self.mlp_l)] {
            if mlp.input_dim() != d || mlp.output_dim() != d {
                return Err(Error::dim(
                    "ModelParams",
                    format!("embedding dim {d}"),
                    format!("{name} {}->{}", mlp.input_dim(), mlp.output_dim()),
                ));
            }
        }
        for (name, head) in [("lang_head", &self.lang_head), ("adv_head", &self.adv_head)] {
            if head.weight.rows() != d || head.bias.len() != head.weight.cols() {
                return Err(Error::dim(
                    "ModelParams",
                    format!("embedding dim {d}"),
                    format!("{name} {} bias[{}]", head.weight.shape_str(), head.bias.len()),
                ));
            }
        }
        if self.lang_head.languages() != self.adv_head.languages() {
            return Err(Error::dim(
                "ModelParams",
                format!("lang_head L={}", self.lang_head.languages()),
                format!("adv_head L={}", self.adv_head.languages()),
            ));
        }
        if self.languages() < 2 {
            return Err(Error::Config("classifier heads need at least 2 languages".into()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp_m: self.mlp_m.zeros_like(),
            mlp_l: self.mlp_l.zeros_like(),
            lang_head: self.lang_head.zeros_like(),
            adv_head: self.adv_head.zeros_like(),
        }
    }

    /// Every parameter tensor with a stable dotted path, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, mlp) in [("mlp_m", &self.mlp_m), ("mlp_l", &self.mlp_l)] {
            for (k, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.layers[{k}].weight"), layer.weight.data()));
                out.push((format!("{name}.layers[{k}].bias"), layer.bias.as_slice()));
            }
        }
        for (name, head) in [("lang_head", &self.lang_head), ("adv_head", &self.adv_head)] {
            out.push((format!("{name}.weight"), head.weight.data()));
            out.push((format!("{name}.bias"), head.bias.as_slice()));
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for mlp in [&mut self.mlp_m, &mut self.mlp_l] {
            for layer in mlp.layers.iter_mut() {
                out.push(layer.weight.data_mut());
                out.push(layer.bias.as_mut_slice());
            }
        }
        for head in [&mut self.lang_head, &mut self.adv_head] {
            out.push(head.weight.data_mut());
            out.push(head.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Copy of `self` with every parameter replaced from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                "ModelParams::with_flat",
                format!("{} params", self.num_params()),
                format!("{} values", flat.len()),
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(out)
    }

    /// Index ranges of the flat vector that belong to `mlp_m`.
    pub fn flat_range_mlp_m(&self) -> std::ops::Range<usize> {
        let n: usize = self
            .mlp_m
            .layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum();
        0..n
    }

    /// First non-finite entry, reported by path.
    pub fn find_non_finite(&self) -> Option<String> {
        self.tensors().into_iter().find_map(|(path, t)| {
            t.iter()
                .position(|v| !v.is_finite())
                .map(|i| format!("{path}[{i}]"))
        })
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn glorot_matrix(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::new(fan_in, fan_out, data).expect("glorot shape")
}

fn init_mlp(rng: &mut ChaCha8Rng, d: usize, hidden: &[usize], activation: Activation) -> MlpParams {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d);
    dims.extend_from_slice(hidden);
    dims.push(d);
    let layers = dims
        .windows(2)
        .map(|w| Layer {
            weight: glorot_matrix(rng, w[0], w[1]),
            bias: vec![0.0; w[1]],
        })
        .collect();
    MlpParams { layers, activation }
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_model(
    seed: u64,
    d: usize,
    hidden_layers: &[usize],
    languages: usize,
    activation: Activation,
) -> Result<ModelParams> {
    if d == 0 {
        return Err(Error::Config("embedding dimension must be at least 1".into()));
    }
    if languages < 2 {
        return Err(Error::Config(format!(
            "need at least 2 languages for the classifier heads, got {languages}"
        )));
    }
    if hidden_layers.contains(&0) {
        return Err(Error::Config("hidden layer widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp_m = init_mlp(&mut rng, d, hidden_layers, activation);
    let mlp_l = init_mlp(&mut rng, d, hidden_layers, activation);
    let lang_head = ClassifierHead {
        weight: glorot_matrix(&mut rng, d, languages),
        bias: vec![0.0; languages],
    };
    let adv_head = ClassifierHead {
        weight: glorot_matrix(&mut rng, d, languages),
        bias: vec![0.0; languages],
    };
    Ok(ModelParams {
        mlp_m,
        mlp_l,
        lang_head,
        adv_head,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct ForwardCache {
    m_src: MlpTrace,
    l_src: MlpTrace,
    m_tgt: MlpTrace,
    l_tgt: MlpTrace,
}

/// The four extracted representations of a mini-batch plus the originals.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledBatch {
    pub s_m: Matrix,
    pub s_l: Matrix,
    pub t_m: Matrix,
    pub t_l: Matrix,
    pub e_s: Matrix,
    pub e_t: Matrix,
    cache: Option<ForwardCache>,
}

impl DisentangledBatch {
    /// Assemble a batch from explicit representations. Such a batch carries no
    /// forward trace, so it can be scored but not backpropagated into a model.
    pub fn from_parts(
        s_m: Matrix,
        s_l: Matrix,
        t_m: Matrix,
        t_l: Matrix,
        e_s: Matrix,
        e_t: Matrix,
    ) -> Result<Self> {
        let shape = e_s.shape();
        for (name, m) in [("s_m", &s_m), ("s_l", &s_l), ("t_m", &t_m), ("t_l", &t_l), ("e_t", &e_t)] {
            if m.shape() != shape {
                return Err(Error::dim(
                    "DisentangledBatch",
                    format!("e_s {}", e_s.shape_str()),
                    format!("{name} {}", m.shape_str()),
                ));
            }
        }
        Ok(Self {
            s_m,
            s_l,
            t_m,
            t_l,
            e_s,
            e_t,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.e_s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.e_s.cols()
    }

    pub fn has_trace(&self) -> bool {
        self.cache.is_some()
    }
}

/// Run both extraction networks over a batch of aligned source/target rows.
pub fn disentangle_forward(params: &ModelParams, e_s: &Matrix, e_t: &Matrix) -> Result<DisentangledBatch> {
    let d = params.dim();
    if e_s.cols() != d || e_t.cols() != d {
        return Err(Error::dim(
            "disentangle_forward",
            format!("model dim {d}"),
            format!("e_s {} / e_t {}", e_s.shape_str(), e_t.shape_str()),
        ));
    }
    if e_s.rows() != e_t.rows() {
        return Err(Error::dim("disentangle_forward", e_s.shape_str(), e_t.shape_str()));
    }
    let (s_m, m_src) = params.mlp_m.forward(e_s)?;
    let (s_l, l_src) = params.mlp_l.forward(e_s)?;
    let (t_m, m_tgt) = params.mlp_m.forward(e_t)?;
    let (t_l, l_tgt) = params.mlp_l.forward(e_t)?;
    Ok(DisentangledBatch {
        s_m,
        s_l,
        t_m,
        t_l,
        e_s: e_s.clone(),
        e_t: e_t.clone(),
        cache: Some(ForwardCache {
            m_src,
            l_src,
            m_tgt,
            l_tgt,
        }),
    })
}

/// Element-wise sum of a semantic and a language representation.
pub fn reconstruct(m: &Matrix, l: &Matrix) -> Result<Matrix> {
    m.add(l)
        .map_err(|_| Error::dim("reconstruct", m.shape_str(), l.shape_str()))
}

/// Logits `X W + b`.
pub fn classify(head: &ClassifierHead, x: &Matrix) -> Result<Matrix> {
    affine_forward(x, &head.weight, &head.bias)
}

/// Backward pass of [`classify`]. Head gradients are always the true ones;
/// with `reverse_grad` the gradient flowing into `x` is scaled by `-lambda`.
pub fn classify_backward(
    head: &ClassifierHead,
    x: &Matrix,
    dlogits: &Matrix,
    reverse_grad: bool,
    lambda: f64,
) -> Result<(Matrix, ClassifierHead)> {
    let g = affine_backward(x, &head.weight, dlogits)?;
    let dx = if reverse_grad { g.dx.scale(-lambda) } else { g.dx };
    Ok((
        dx,
        ClassifierHead {
            weight: g.dw,
            bias: g.dbias,
        },
    ))
}

/// Gradients of a scalar objective w.r.t. everything a batch forward produced.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub s_m: Matrix,
    pub s_l: Matrix,
    pub t_m: Matrix,
    pub t_l: Matrix,
    /// w.r.t. the language-head logits over `[s_l; t_l]`.
    pub lang_logits: Option<Matrix>,
    /// w.r.t. the adversarial-head logits over `[s_m; t_m]`.
    pub adv_logits: Option<Matrix>,
    /// Factor applied to the gradient the adversarial head sends back into
    /// the semantic rows: `-lambda` under gradient reversal, `1` for a plain
    /// classifier.
    pub adv_input_scale: f64,
}

impl OutputGrads {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            s_m: Matrix::zeros(n, d),
            s_l: Matrix::zeros(n, d),
            t_m: Matrix::zeros(n, d),
            t_l: Matrix::zeros(n, d),
            lang_logits: None,
            adv_logits: None,
            adv_input_scale: 1.0,
        }
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &OutputGrads, weight: f64) -> Result<()> {
        self.s_m.add_scaled(&other.s_m, weight)?;
        self.s_l.add_scaled(&other.s_l, weight)?;
        self.t_m.add_scaled(&other.t_m, weight)?;
        self.t_l.add_scaled(&other.t_l, weight)?;
        for (mine, theirs) in [
            (&mut self.lang_logits, &other.lang_logits),
            (&mut self.adv_logits, &other.adv_logits),
        ] {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_scaled(t, weight)?,
                    None => *mine = Some(t.scale(weight)),
                }
            }
        }
        if other.adv_logits.is_some() {
            self.adv_input_scale = other.adv_input_scale;
        }
        Ok(())
    }
}

/// Chain output gradients back through heads and both networks. Gradients of
/// the shared networks from the source and target paths are summed.
pub fn model_backward(params: &ModelParams, batch: &DisentangledBatch, grads: &OutputGrads) -> Result<ModelParams> {
    let cache = batch
        .cache
        .as_ref()
        .ok_or_else(|| Error::InvalidBatch("batch carries no forward trace".into()))?;
    let shape = batch.s_m.shape();
    for (name, g) in [("s_m", &grads.s_m), ("s_l", &grads.s_l), ("t_m", &grads.t_m), ("t_l", &grads.t_l)] {
        if g.shape() != shape {
            return Err(Error::InvalidBatch(format!(
                "missing or misshapen gradient for {name}: expected {}x{}, got {}",
                shape.0,
                shape.1,
                g.shape_str()
            )));
        }
    }
    let n = batch.len();
    let mut out = params.zeros_like();
    let mut d_s_m = grads.s_m.clone();
    let mut d_s_l = grads.s_l.clone();
    let mut d_t_m = grads.t_m.clone();
    let mut d_t_l = grads.t_l.clone();

    if let Some(dl) = &grads.lang_logits {
        let x = batch.s_l.vstack(&batch.t_l)?;
        let (dx, head) = classify_backward(&params.lang_head, &x, dl, false, 0.0)?;
        out.lang_head = head;
        let (a, b) = dx.split_rows(n);
        d_s_l.add_assign(&a)?;
        d_t_l.add_assign(&b)?;
    }
    if let Some(dl) = &grads.adv_logits {
        let x = batch.s_m.vstack(&batch.t_m)?;
        let (dx, head) = classify_backward(&params.adv_head, &x, dl, false, 0.0)?;
        out.adv_head = head;
        let (a, b) = dx.split_rows(n);
        d_s_m.add_scaled(&a, grads.adv_input_scale)?;
        d_t_m.add_scaled(&b, grads.adv_input_scale)?;
    }

    params.mlp_m.backward(&cache.m_src, &d_s_m, &mut out.mlp_m)?;
    params.mlp_m.backward(&cache.m_tgt, &d_t_m, &mut out.mlp_m)?;
    params.mlp_l.backward(&cache.l_src, &d_s_l, &mut out.mlp_l)?;
    params.mlp_l.backward(&cache.l_tgt, &d_t_l, &mut out.mlp_l)?;
    Ok(out)
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub d: usize,
    #[serde(rename = "L")]
    pub languages: usize,
    pub activation: Activation,
    pub layer_shapes: Vec<[usize; 2]>,
    pub params: ModelParams,
    pub objective: LossConfig,
}

impl Checkpoint {
    pub fn new(params: ModelParams, objective: LossConfig) -> Self {
        let layer_shapes = params
            .mlp_m
            .layers
            .iter()
            .map(|l| [l.weight.rows(), l.weight.cols()])
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            d: params.dim(),
            languages: params.languages(),
            activation: params.mlp_m.activation,
            layer_shapes,
            params,
            objective,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint format_version {}",
                path.display(),
                ckpt.format_version
            )));
        }
        ckpt.params.validate()?;
        if ckpt.params.dim() != ckpt.d || ckpt.params.languages() != ckpt.languages {
            return Err(Error::Config(format!(
                "{}: header (d={}, L={}) disagrees with weights (d={}, L={})",
                path.display(),
                ckpt.d,
                ckpt.languages,
                ckpt.params.dim(),
                ckpt.params.languages()
            )));
        }
        Ok(ckpt)
    }
}
