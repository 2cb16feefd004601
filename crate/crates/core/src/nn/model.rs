//! Encoder + linear classifier models and their parameter sets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderArch {
    /// Fully connected stack `input → hidden... → feature_dim` with ReLU
    /// between layers; `final_relu` also rectifies the features.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        feature_dim: usize,
        final_relu: bool,
    },
    /// `channels.len()` blocks of conv3×3 → ReLU → maxpool2, then a
    /// fully connected ReLU layer to `feature_dim`.
    Conv {
        in_channels: usize,
        image_size: usize,
        channels: Vec<usize>,
        feature_dim: usize,
    },
}

impl EncoderArch {
    pub fn feature_dim(&self) -> usize {
        match self {
            EncoderArch::Mlp { feature_dim, .. } | EncoderArch::Conv { feature_dim, .. } => *feature_dim,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            EncoderArch::Mlp { input_dim, .. } => vec![*input_dim],
            EncoderArch::Conv { in_channels, image_size, .. } => vec![*in_channels, *image_size, *image_size],
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, EncoderArch::Conv { .. })
    }

    fn validate(&self) -> Result<()> {
        match self {
            EncoderArch::Mlp { input_dim, hidden, feature_dim, .. } => {
                if *input_dim == 0 || *feature_dim == 0 || hidden.contains(&0) {
                    return Err(Error::Config(format!("degenerate MLP widths in {self:?}")));
                }
            }
            EncoderArch::Conv { in_channels, image_size, channels, feature_dim } => {
                let shrink = 1usize << channels.len();
                if *in_channels == 0 || *feature_dim == 0 || channels.is_empty() || channels.contains(&0) {
                    return Err(Error::Config(format!("degenerate conv widths in {self:?}")));
                }
                if *image_size == 0 || image_size % shrink != 0 {
                    return Err(Error::Config(format!(
                        "image size {image_size} not divisible by {shrink} for {} pooling blocks",
                        channels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of the encoder tensors, in canonical order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self {
            EncoderArch::Mlp { input_dim, hidden, feature_dim, .. } => {
                let mut widths = vec![*input_dim];
                widths.extend(hidden);
                widths.push(*feature_dim);
                for (i, pair) in widths.windows(2).enumerate() {
                    out.push((format!("fc{i}.weight"), vec![pair[1], pair[0]]));
                    out.push((format!("fc{i}.bias"), vec![pair[1]]));
                }
            }
            EncoderArch::Conv { in_channels, image_size, channels, feature_dim } => {
                let mut c_in = *in_channels;
                for (i, &c) in channels.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![c, c_in, 3, 3]));
                    out.push((format!("conv{i}.bias"), vec![c]));
                    c_in = c;
                }
                let side = image_size >> channels.len();
                out.push(("fc.weight".into(), vec![*feature_dim, c_in * side * side]));
                out.push(("fc.bias".into(), vec![*feature_dim]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub encoder: EncoderArch,
    pub num_outputs: usize,
    /// Head holds four rotation-expanded outputs per base class
    /// (`4·y + r`); evaluation reads the rotation-0 block.
    #[serde(default)]
    pub rotation_head: bool,
}

impl ModelArch {
    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    /// Number of base classes the head can predict.
    pub fn base_classes(&self) -> usize {
        if self.rotation_head {
            self.num_outputs / 4
        } else {
            self.num_outputs
        }
    }

    /// Head row used for base class `c` (rotation 0).
    pub fn head_row(&self, c: usize) -> usize {
        if self.rotation_head {
            4 * c
        } else {
            c
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_outputs == 0 || (self.rotation_head && !self.num_outputs.is_multiple_of(4)) {
            return Err(Error::Config(format!("invalid head width {}", self.num_outputs)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// θ = {ξ, ψ}: encoder tensors plus the linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ModelArch,
    pub encoder: Vec<NamedTensor>,
    /// `[num_outputs, feature_dim]`
    pub head_weight: Tensor,
    /// `[num_outputs]`
    pub head_bias: Tensor,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

impl ModelParams {
    /// He-normal encoder weights, Xavier-normal head, zero biases.
    pub fn init(arch: ModelArch, rng: &mut Stream) -> Result<Self> {
        arch.validate()?;
        let mut encoder = Vec::new();
        for (name, shape) in arch.encoder.layout() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                normal_tensor(&shape, (2.0 / fan_in as f64).sqrt(), rng)
            };
            encoder.push(NamedTensor { name, tensor });
        }
        let d = arch.feature_dim();
        let head_weight = normal_tensor(&[arch.num_outputs, d], (2.0 / (d + arch.num_outputs) as f64).sqrt(), rng);
        let head_bias = Tensor::zeros(&[arch.num_outputs]);
        Ok(Self { arch, encoder, head_weight, head_bias })
    }

    /// Assembles parameters, checking every shape against `arch`.
    pub fn from_parts(arch: ModelArch, encoder: Vec<NamedTensor>, head_weight: Tensor, head_bias: Tensor) -> Result<Self> {
        arch.validate()?;
        let layout = arch.encoder.layout();
        if layout.len() != encoder.len() {
            return Err(Error::Shape(format!("expected {} encoder tensors, got {}", layout.len(), encoder.len())));
        }
        for ((name, shape), nt) in layout.iter().zip(&encoder) {
            if *name != nt.name || shape.as_slice() != nt.tensor.shape() {
                return Err(Error::Shape(format!(
                    "encoder tensor {}{:?} does not match {name}{shape:?}",
                    nt.name,
                    nt.tensor.shape()
                )));
            }
        }
        let d = arch.feature_dim();
        if head_weight.shape() != [arch.num_outputs, d] || head_bias.shape() != [arch.num_outputs] {
            return Err(Error::Shape(format!(
                "head {:?}/{:?} does not match {}×{d}",
                head_weight.shape(),
                head_bias.shape(),
                arch.num_outputs
            )));
        }
        Ok(Self { arch, encoder, head_weight, head_bias })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    /// All tensors in canonical order: encoder, head weight, head bias.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.encoder
            .iter()
            .map(|nt| (nt.name.as_str(), &nt.tensor))
            .chain([(HEAD_WEIGHT, &self.head_weight), (HEAD_BIAS, &self.head_bias)])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .iter_mut()
            .map(|nt| &mut nt.tensor)
            .chain([&mut self.head_weight, &mut self.head_bias])
    }

    pub fn num_tensors(&self) -> usize {
        self.encoder.len() + 2
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(|(_, t)| t.len()).sum()
    }

    /// Parameter-wise shape congruence.
    pub fn congruent(&self, other: &ModelParams) -> bool {
        self.num_tensors() == other.num_tensors()
            && self.tensors().zip(other.tensors()).all(|((_, a), (_, b))| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let encoder = self.encoder.iter().map(|nt| g.param(nt.tensor.clone())).collect();
        let head_weight = g.param(self.head_weight.clone());
        let head_bias = g.param(self.head_bias.clone());
        BoundParams { encoder, head_weight, head_bias }
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub encoder: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BoundParams {
    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder.iter().copied().chain([self.head_weight, self.head_bias])
    }

    /// Collects per-tensor gradients, failing on the first non-finite one.
    pub fn gradients(&self, grads: &Gradients, params: &ModelParams) -> Result<GradientSet> {
        let mut tensors = Vec::with_capacity(params.num_tensors());
        for (v, (name, _)) in self.vars().zip(params.tensors()) {
            let t = grads.get(v);
            if !t.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            tensors.push(t);
        }
        Ok(GradientSet { tensors })
    }
}

/// One gradient tensor per parameter tensor, canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self { tensors: params.tensors().map(|(_, t)| Tensor::zeros(t.shape())).collect() }
    }

    /// Flattened view, canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn axpy(&mut self, alpha: f64, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b);
        }
    }
}

/// E(x; ξ) on the tape. `x` is `[B, ...input_shape]`.
pub fn encode_graph(g: &mut Graph, arch: &EncoderArch, p: &BoundParams, x: Var) -> Result<Var> {
    let expect = arch.input_shape();
    let shape = g.value(x).shape();
    if shape.len() != expect.len() + 1 || shape[1..] != expect[..] {
        return Err(Error::Shape(format!("encoder expects [B, {expect:?}], got {shape:?}")));
    }
    match arch {
        EncoderArch::Mlp { final_relu, .. } => {
            let layers = p.encoder.len() / 2;
            let mut h = x;
            for i in 0..layers {
                h = g.linear(h, p.encoder[2 * i], p.encoder[2 * i + 1])?;
                if i + 1 < layers || *final_relu {
                    h = g.relu(h);
                }
            }
            Ok(h)
        }
        EncoderArch::Conv { channels, .. } => {
            let mut h = x;
            for i in 0..channels.len() {
                h = g.conv2d(h, p.encoder[2 * i], p.encoder[2 * i + 1])?;
                h = g.relu(h);
                h = g.max_pool2(h)?;
            }
            let batch = g.value(h).rows();
            let flat = g.value(h).row_len();
            h = g.reshape(h, &[batch, flat])?;
            let k = channels.len();
            h = g.linear(h, p.encoder[2 * k], p.encoder[2 * k + 1])?;
            Ok(g.relu(h))
        }
    }
}

/// D(f; ψ) = ψ·f + bias on the tape.
pub fn classify_graph(g: &mut Graph, p: &BoundParams, features: Var) -> Result<Var> {
    g.linear(features, p.head_weight, p.head_bias)
}

/// Forward-only feature extraction in fixed-size chunks.
pub fn encode(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.rows();
    let d = params.feature_dim();
    let mut out = Vec::with_capacity(n * d);
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(inputs.gather_rows(&idx));
        let f = encode_graph(&mut g, &params.arch.encoder, &bound, x)?;
        out.extend_from_slice(g.value(f).data());
        start = end;
    }
    Tensor::from_vec(&[n, d], out)
}

/// Forward-only head: `[B, d] → [B, num_outputs]`.
pub fn classify(params: &ModelParams, features: &Tensor) -> Result<Tensor> {
    let d = params.feature_dim();
    if features.shape().len() != 2 || features.shape()[1] != d {
        return Err(Error::Shape(format!("features {:?} vs feature_dim {d}", features.shape())));
    }
    let mut g = Graph::new();
    let w = g.constant(params.head_weight.clone());
    let b = g.constant(params.head_bias.clone());
    let f = g.constant(features.clone());
    let y = g.linear(f, w, b)?;
    Ok(g.value(y).clone())
}

/// Uniform draw used by tests and jitter routines.
pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape product matches")
}
