//! Supervised pretraining on fractal classes, head slicing and linear probes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::nn::model::{encode, encode_graph, classify_graph, EncoderArch, ModelArch, ModelParams, NamedTensor};
use crate::nn::{adam_step, AdamConfig, Graph, LrSchedule, OptimizerState, Reduction};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Indexed by epoch.
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 32, schedule: LrSchedule::default(), adam: AdamConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Every minibatch loss in step order.
    pub step_losses: Vec<f64>,
    pub train_accuracy: f64,
}

fn check_input(arch: &ModelArch, data: &LabeledDataset) -> Result<()> {
    if arch.encoder.input_shape() != data.shape().dims() {
        return Err(Error::Shape(format!(
            "encoder expects {:?}, data is {:?}",
            arch.encoder.input_shape(),
            data.shape().dims()
        )));
    }
    Ok(())
}

/// Minibatch Adam on mean cross-entropy over the full head.
pub fn pretrain(init: ModelParams, data: &LabeledDataset, cfg: &PretrainConfig) -> Result<(ModelParams, PretrainReport)> {
    check_input(&init.arch, data)?;
    if init.arch.rotation_head {
        return Err(Error::Config("pretraining uses a plain head".into()));
    }
    if data.num_classes() > init.arch.num_outputs {
        return Err(Error::Dimension(format!(
            "{} fractal classes exceed head width {}",
            data.num_classes(),
            init.arch.num_outputs
        )));
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("empty pretraining data or zero batch size".into()));
    }
    let mut params = init;
    let mut opt = OptimizerState::new(&params, cfg.schedule, cfg.adam);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "pretrain-epoch", &[epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(idx);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let xv = g.constant(x);
            let f = encode_graph(&mut g, &params.arch.encoder, &bound, xv)?;
            let logits = classify_graph(&mut g, &bound, f)?;
            let loss = g.cross_entropy(logits, &y, Reduction::Mean)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss {value} at epoch {epoch}")));
            }
            let grads = bound.gradients(&g.backward(loss)?, &params)?;
            adam_step(&mut params, &grads, &mut opt, epoch)?;
            step_losses.push(value);
            total += value;
            batches += 1;
        }
        log::debug!("pretrain epoch {epoch}: loss {:.4}", total / batches as f64);
        epoch_losses.push(total / batches as f64);
    }
    let train_accuracy = evaluate(&params, data)?;
    Ok((params, PretrainReport { epoch_losses, step_losses, train_accuracy }))
}

/// Keeps head rows `0..target_outputs` and the encoder unchanged.
pub fn slice_head(pretrained: &ModelParams, target_outputs: usize, rotation_head: bool) -> Result<ModelParams> {
    if target_outputs == 0 || target_outputs > pretrained.arch.num_outputs {
        return Err(Error::Dimension(format!(
            "cannot slice {target_outputs} outputs from a head of {}",
            pretrained.arch.num_outputs
        )));
    }
    let d = pretrained.feature_dim();
    let arch = ModelArch { encoder: pretrained.arch.encoder.clone(), num_outputs: target_outputs, rotation_head };
    let weight = Tensor::from_vec(&[target_outputs, d], pretrained.head_weight.data()[..target_outputs * d].to_vec())?;
    let bias = Tensor::from_vec(&[target_outputs], pretrained.head_bias.data()[..target_outputs].to_vec())?;
    ModelParams::from_parts(arch, pretrained.encoder.clone(), weight, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 64, lr: 1e-2, seed: 0 }
    }
}

/// Test accuracy of a linear classifier trained on frozen features.
pub fn linear_probe(encoder: &ModelParams, train: &LabeledDataset, test: &LabeledDataset, cfg: &ProbeConfig) -> Result<f64> {
    check_input(&encoder.arch, train)?;
    check_input(&encoder.arch, test)?;
    let all = |d: &LabeledDataset| d.batch(&(0..d.len()).collect::<Vec<_>>());
    let (xtr, ytr) = all(train);
    let (xte, yte) = all(test);
    let ftr = encode(encoder, &xtr)?;
    let fte = encode(encoder, &xte)?;
    let d = encoder.feature_dim();
    let classes = train.num_classes().max(test.num_classes());

    // identity encoder over the frozen features, only the head is trained
    let arch = ModelArch {
        encoder: EncoderArch::Mlp { input_dim: d, hidden: vec![], feature_dim: d, final_relu: false },
        num_outputs: classes,
        rotation_head: false,
    };
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    let mut init = ModelParams::init(arch.clone(), &mut rng::stream(cfg.seed, "probe-init", &[]))?;
    init.encoder = vec![
        NamedTensor { name: "fc0.weight".into(), tensor: eye },
        NamedTensor { name: "fc0.bias".into(), tensor: Tensor::zeros(&[d]) },
    ];
    let mut head = init;
    let schedule = LrSchedule { base_lr: cfg.lr, halve_every: 0 };
    let mut opt = OptimizerState::new(&head, schedule, AdamConfig::default());
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ftr.rows()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "probe-epoch", &[epoch as u64]));
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let mut g = Graph::new();
            let w = g.param(head.head_weight.clone());
            let b = g.param(head.head_bias.clone());
            let f = g.constant(ftr.gather_rows(idx));
            let logits = g.linear(f, w, b)?;
            let loss = g.cross_entropy(logits, &y, Reduction::Mean)?;
            let grads = g.backward(loss)?;
            let mut set = crate::nn::GradientSet::zeros_like(&head);
            let n = set.tensors.len();
            set.tensors[n - 2] = grads.get(w);
            set.tensors[n - 1] = grads.get(b);
            adam_step(&mut head, &set, &mut opt, 0)?;
        }
    }
    let mut g = Graph::new();
    let w = g.constant(head.head_weight.clone());
    let b = g.constant(head.head_bias.clone());
    let f = g.constant(fte);
    let logits = g.linear(f, w, b)?;
    let logits = g.value(logits);
    let correct = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            best == yte[r]
        })
        .count();
    Ok(correct as f64 / yte.len().max(1) as f64)
}
