//! Client side: class prototypes, augmentation radius, the prototype and
//! representation losses, and one round of local training.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::model::{classify_graph, encode, encode_graph, BoundParams};
use crate::nn::{adam_step, label_augment, AdamConfig, Graph, LrSchedule, ModelParams, OptimizerState, Reduction, Var};
use crate::rng::Stream;
use crate::server::{ClientReport, PrototypeStore};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub support_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusStat {
    pub radius: f64,
    /// Local samples the radius was computed from.
    pub support_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusNorm {
    /// `r² = mean over local classes of Tr(Σ_c)/d`
    #[default]
    PerClass,
    /// `r² = Σ_c Tr(Σ_c)/d` divided by the local sample count.
    PerSample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Every pool vector of another class is a negative.
    #[default]
    PerVector,
    /// One negative per other class: its normalized mean pool vector.
    ClassMean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprNorm {
    /// Divide the class sum by the number of active classes.
    #[default]
    ActiveClasses,
    /// Divide by the client's stage sample count.
    StageSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprConfig {
    pub negatives: NegativeMode,
    pub normalization: ReprNorm,
    /// Add an augmented prototype for active classes that are already
    /// discovered to their positive sets.
    pub include_active_prototypes: bool,
    pub eps: f64,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            negatives: NegativeMode::PerVector,
            normalization: ReprNorm::ActiveClasses,
            include_active_prototypes: true,
            eps: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Four-way rotation label augmentation (image data only).
    pub label_augment: bool,
    pub radius_norm: RadiusNorm,
    pub repr: ReprConfig,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            lambda_p: 1e-2,
            lambda_r: 1e-2,
            local_epochs: 1,
            batch_size: 64,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            label_augment: false,
            radius_norm: RadiusNorm::PerClass,
            repr: ReprConfig::default(),
        }
    }
}

fn class_groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    groups
}

/// Per-class feature means, ascending class id.
pub fn prototypes_from_features(features: &Tensor, labels: &[usize]) -> Vec<Prototype> {
    let d = features.row_len();
    class_groups(labels)
        .into_iter()
        .map(|(c, rows)| {
            let mut mean = vec![0.0; d];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(features.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
            Prototype { class_id: c, mean, support_count: rows.len() }
        })
        .collect()
}

/// Radius from per-class population covariance traces. `None` without
/// samples.
pub fn radius_from_features(features: &Tensor, labels: &[usize], norm: RadiusNorm) -> Option<RadiusStat> {
    if labels.is_empty() {
        return None;
    }
    let d = features.row_len() as f64;
    let protos = prototypes_from_features(features, labels);
    let groups = class_groups(labels);
    let mut sum = 0.0;
    for p in &protos {
        let rows = &groups[&p.class_id];
        let ss: f64 = rows
            .iter()
            .map(|&r| features.row(r).iter().zip(&p.mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum();
        sum += ss / rows.len() as f64 / d;
    }
    let denom = match norm {
        RadiusNorm::PerClass => protos.len(),
        RadiusNorm::PerSample => labels.len(),
    };
    Some(RadiusStat { radius: (sum / denom as f64).sqrt(), support_count: labels.len() })
}

/// Prototypes and radius of `indices` under `params` (un-augmented inputs).
pub fn class_statistics(
    params: &ModelParams,
    data: &LabeledDataset,
    indices: &[usize],
    norm: RadiusNorm,
) -> Result<(Vec<Prototype>, Option<RadiusStat>)> {
    if indices.is_empty() {
        return Ok((Vec::new(), None));
    }
    let (x, y) = data.batch(indices);
    let f = encode(params, &x)?;
    Ok((prototypes_from_features(&f, &y), radius_from_features(&f, &y, norm)))
}

/// `e + r·z`, `z ~ N(0, I)`.
pub fn augment_prototype(mean: &[f64], radius: f64, rng: &mut Stream) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + radius * z
        })
        .collect()
}

fn normalize(v: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = dot(v, v).sqrt();
    (v.iter().map(|x| x / (n + eps)).collect(), n)
}

/// Pulls `∂L/∂u` back through `u = v / (‖v‖ + ε)`.
fn normalize_backward(v: &[f64], n: f64, eps: f64, gu: &[f64]) -> Vec<f64> {
    let a = 1.0 / (n + eps);
    if n == 0.0 {
        return gu.iter().map(|g| g * a).collect();
    }
    let b = dot(v, gu) / (n * (n + eps) * (n + eps));
    gu.iter().zip(v).map(|(g, x)| g * a - x * b).collect()
}

/// Supervised contrastive loss on raw cosine similarity (no temperature).
///
/// For every active class `c` with `N_c ≥ 2` pool members and every ordered
/// pair `i ≠ j` of them the term is `−log(e^{s_ij} / (e^{s_ij} + Σ_a e^{s_ia}))`
/// over the negatives `a`; pairs are averaged per class, classes are summed
/// and the sum divided by `normalizer`. Returns the value and `∂L/∂pool`.
pub fn representation_loss(
    pool: &Tensor,
    labels: &[usize],
    active: &[usize],
    normalizer: f64,
    cfg: &ReprConfig,
) -> Result<(f64, Tensor)> {
    let n = pool.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} pool rows", labels.len())));
    }
    if !(normalizer > 0.0) {
        return Err(Error::Config(format!("representation normalizer {normalizer} must be positive")));
    }
    let d = pool.row_len();
    let eps = cfg.eps;
    let (u, norms): (Vec<Vec<f64>>, Vec<f64>) = (0..n).map(|i| normalize(pool.row(i), eps)).unzip();
    let groups = class_groups(labels);
    let mut gu = vec![vec![0.0; d]; n];

    // class-mean negatives, keyed by class
    let mut means: BTreeMap<usize, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    if cfg.negatives == NegativeMode::ClassMean {
        for (&k, rows) in &groups {
            let mut m = vec![0.0; d];
            for &r in rows {
                m.iter_mut().zip(pool.row(r)).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= rows.len() as f64);
            let (um, nm) = normalize(&m, eps);
            means.insert(k, (m, um, nm));
        }
    }
    let mut gmean: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    let active: BTreeSet<usize> = active.iter().copied().collect();
    let mut loss = 0.0;
    for c in active {
        let Some(pos) = groups.get(&c) else { continue };
        let nc = pos.len();
        if nc < 2 {
            continue;
        }
        let coef = 1.0 / ((nc * (nc - 1)) as f64 * normalizer);
        // negatives as (anchor vector, source) with source = row or class
        let negs: Vec<(&[f64], usize)> = match cfg.negatives {
            NegativeMode::PerVector => (0..n).filter(|&a| labels[a] != c).map(|a| (u[a].as_slice(), a)).collect(),
            NegativeMode::ClassMean => means.iter().filter(|(&k, _)| k != c).map(|(&k, (_, um, _))| (um.as_slice(), k)).collect(),
        };
        for &i in pos {
            let e_neg: Vec<f64> = negs.iter().map(|(a, _)| dot(&u[i], a).exp()).collect();
            let neg: f64 = e_neg.iter().sum();
            let mut inv_sum = 0.0;
            for &j in pos {
                if j == i {
                    continue;
                }
                let s = dot(&u[i], &u[j]);
                let es = s.exp();
                let denom = es + neg;
                loss += coef * (neg / es).ln_1p();
                let gs = coef * (es / denom - 1.0);
                for k in 0..d {
                    gu[i][k] += gs * u[j][k];
                    gu[j][k] += gs * u[i][k];
                }
                inv_sum += coef / denom;
            }
            for ((a, src), e) in negs.iter().zip(&e_neg) {
                let w = inv_sum * e;
                for k in 0..d {
                    gu[i][k] += w * a[k];
                }
                let target = match cfg.negatives {
                    NegativeMode::PerVector => &mut gu[*src],
                    NegativeMode::ClassMean => gmean.entry(*src).or_insert_with(|| vec![0.0; d]),
                };
                for k in 0..d {
                    target[k] += w * u[i][k];
                }
            }
        }
    }

    let mut grad = Vec::with_capacity(n * d);
    for i in 0..n {
        grad.extend(normalize_backward(pool.row(i), norms[i], eps, &gu[i]));
    }
    for (k, g) in gmean {
        let (m, _, nm) = &means[&k];
        let gm = normalize_backward(m, *nm, eps, &g);
        let rows = &groups[&k];
        for &r in rows {
            for (t, v) in grad[r * d..(r + 1) * d].iter_mut().zip(&gm) {
                *t += v / rows.len() as f64;
            }
        }
    }
    Ok((loss, Tensor::from_vec(&[n, d], grad)?))
}

/// The stochastic inputs of one local step; the loss is a deterministic
/// function of these and the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// Possibly rotation-augmented inputs.
    pub inputs: Tensor,
    /// Head rows targeted by each input.
    pub labels: Vec<usize>,
    /// Rows of `inputs` that enter the representation pool.
    pub repr_rows: Vec<usize>,
    /// Base class of each of those rows.
    pub repr_labels: Vec<usize>,
    /// Augmented prototypes of old classes with their head rows.
    pub proto_batch: Option<(Tensor, Vec<usize>)>,
    /// Augmented prototypes appended to the pool, with base classes.
    pub repr_extras: Option<(Tensor, Vec<usize>)>,
    pub active_classes: Vec<usize>,
    pub stage_samples: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    pub ce_var: Var,
    pub lp_var: Option<Var>,
    pub lr_var: Option<Var>,
    pub ce: f64,
    pub lp: f64,
    pub lr: f64,
}

/// `L = CE + λ_p·L_p + λ_r·L_r` on the tape. Terms with a zero weight or
/// without inputs are left out entirely.
pub fn step_loss(g: &mut Graph, params: &ModelParams, bound: &BoundParams, step: &StepInputs, cfg: &ClientConfig) -> Result<StepLoss> {
    let x = g.constant(step.inputs.clone());
    let f = encode_graph(g, &params.arch.encoder, bound, x)?;
    let logits = classify_graph(g, bound, f)?;
    let ce = g.cross_entropy(logits, &step.labels, Reduction::Mean)?;
    let mut out = StepLoss { total: ce, ce_var: ce, lp_var: None, lr_var: None, ce: g.value(ce).item(), lp: 0.0, lr: 0.0 };

    if let (true, Some((protos, rows))) = (cfg.lambda_p != 0.0, &step.proto_batch) {
        let pv = g.constant(protos.clone());
        let pl = classify_graph(g, bound, pv)?;
        let lp = g.cross_entropy(pl, rows, Reduction::Sum)?;
        out.lp = g.value(lp).item();
        out.lp_var = Some(lp);
        let scaled = g.scale(lp, cfg.lambda_p);
        out.total = g.add(out.total, scaled)?;
    }

    if cfg.lambda_r != 0.0 {
        let fr = g.gather_rows(f, &step.repr_rows);
        let mut labels = step.repr_labels.clone();
        let pool = match &step.repr_extras {
            Some((extra, classes)) => {
                labels.extend_from_slice(classes);
                let ev = g.constant(extra.clone());
                g.concat_rows(fr, ev)?
            }
            None => fr,
        };
        let normalizer = match cfg.repr.normalization {
            ReprNorm::ActiveClasses => step.active_classes.iter().collect::<BTreeSet<_>>().len().max(1),
            ReprNorm::StageSamples => step.stage_samples.max(1),
        } as f64;
        let (value, grad) = representation_loss(g.value(pool), &labels, &step.active_classes, normalizer, &cfg.repr)?;
        let lr = g.fused_scalar(value, vec![(pool, grad)])?;
        out.lr = value;
        out.lr_var = Some(lr);
        let scaled = g.scale(lr, cfg.lambda_r);
        out.total = g.add(out.total, scaled)?;
    }
    Ok(out)
}

/// Read-only view of what a selected client sees in a round.
#[derive(Debug, Clone, Copy)]
pub struct ClientContext<'a> {
    pub client_id: usize,
    pub round: usize,
    pub data: &'a LabeledDataset,
    /// Local samples of the active task.
    pub stage_indices: &'a [usize],
    pub active_classes: &'a [usize],
    pub store: &'a PrototypeStore,
}

fn rows_tensor(rows: &[Vec<f64>], d: usize) -> Result<Tensor> {
    Tensor::from_vec(&[rows.len(), d], rows.concat())
}

/// Draws the stochastic parts of one step for the minibatch `batch`.
pub fn sample_step_inputs(
    params: &ModelParams,
    ctx: &ClientContext,
    batch: &[usize],
    cfg: &ClientConfig,
    rng: &mut Stream,
) -> Result<StepInputs> {
    let (x, y) = ctx.data.batch(batch);
    let b = y.len();
    let (inputs, labels) = if cfg.label_augment {
        label_augment(&x, &y)?
    } else {
        let rows = y.iter().map(|&c| params.arch.head_row(c)).collect();
        (x, rows)
    };
    let d = params.feature_dim();
    let radius = ctx.store.radius.unwrap_or(0.0);
    let active: BTreeSet<usize> = ctx.active_classes.iter().copied().collect();
    let old: Vec<usize> = ctx.store.discovered().into_iter().filter(|c| !active.contains(c)).collect();

    let mut proto_batch = None;
    if cfg.lambda_p != 0.0 && !old.is_empty() {
        let mut rows = Vec::with_capacity(b);
        let mut heads = Vec::with_capacity(b);
        for _ in 0..b {
            let c = old[rng.random_range(0..old.len())];
            rows.push(augment_prototype(ctx.store.get(c).expect("discovered"), radius, rng));
            heads.push(params.arch.head_row(c));
        }
        proto_batch = Some((rows_tensor(&rows, d)?, heads));
    }

    let mut repr_extras = None;
    if cfg.lambda_r != 0.0 {
        let mut classes = old.clone();
        if cfg.repr.include_active_prototypes {
            classes.extend(active.iter().filter(|c| ctx.store.get(**c).is_some()));
        }
        if !classes.is_empty() {
            let rows: Vec<Vec<f64>> =
                classes.iter().map(|&c| augment_prototype(ctx.store.get(c).expect("discovered"), radius, rng)).collect();
            repr_extras = Some((rows_tensor(&rows, d)?, classes));
        }
    }

    Ok(StepInputs {
        inputs,
        labels,
        repr_rows: (0..b).collect(),
        repr_labels: y,
        proto_batch,
        repr_extras,
        active_classes: ctx.active_classes.to_vec(),
        stage_samples: ctx.stage_indices.len(),
    })
}

/// Per-step loss components of one client round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub ce: Vec<f64>,
    pub lp: Vec<f64>,
    pub lr: Vec<f64>,
}

impl LossTrace {
    fn mean(v: &[f64]) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn mean_ce(&self) -> f64 {
        Self::mean(&self.ce)
    }

    pub fn mean_lp(&self) -> f64 {
        Self::mean(&self.lp)
    }

    pub fn mean_lr(&self) -> f64 {
        Self::mean(&self.lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub params: ModelParams,
    pub report: ClientReport,
    pub sample_count: usize,
    pub losses: LossTrace,
}

fn check_context(global: &ModelParams, ctx: &ClientContext, cfg: &ClientConfig) -> Result<()> {
    let arch = &global.arch;
    if arch.encoder.input_shape() != ctx.data.shape().dims() {
        return Err(Error::Shape(format!("encoder expects {:?}, data is {:?}", arch.encoder.input_shape(), ctx.data.shape().dims())));
    }
    if cfg.label_augment != arch.rotation_head {
        return Err(Error::Config("label augmentation and rotation head must be enabled together".into()));
    }
    if cfg.label_augment && !ctx.data.shape().is_image() {
        return Err(Error::Config("label augmentation needs image data".into()));
    }
    if let Some(&c) = ctx.active_classes.iter().find(|&&c| c >= arch.base_classes()) {
        return Err(Error::Dimension(format!("class {c} beyond head of {} classes", arch.base_classes())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// One round of local training from the received global model.
/// Prototypes and radius are computed with the received parameters before
/// any update; the optimizer starts fresh.
pub fn local_train(global: &ModelParams, ctx: &ClientContext, cfg: &ClientConfig, rng: &mut Stream) -> Result<ClientUpdate> {
    check_context(global, ctx, cfg)?;
    let (prototypes, radius) = class_statistics(global, ctx.data, ctx.stage_indices, cfg.radius_norm)?;
    let report = ClientReport { client_id: ctx.client_id, prototypes, radius };
    let mut params = global.clone();
    let mut losses = LossTrace::default();
    if ctx.stage_indices.is_empty() {
        return Ok(ClientUpdate { params, report, sample_count: 0, losses });
    }
    let mut opt = OptimizerState::new(&params, cfg.schedule, cfg.adam);
    let mut order = ctx.stage_indices.to_vec();
    for epoch in 0..cfg.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = sample_step_inputs(&params, ctx, batch, cfg, rng)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let loss = step_loss(&mut g, &params, &bound, &step, cfg)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss {total} (ce {}, lp {}, lr {}) in epoch {epoch}",
                    loss.ce, loss.lp, loss.lr
                )));
            }
            let grads = bound.gradients(&g.backward(loss.total)?, &params)?;
            adam_step(&mut params, &grads, &mut opt, ctx.round)?;
            losses.ce.push(loss.ce);
            losses.lp.push(loss.lp);
            losses.lr.push(loss.lr);
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric("client parameters became non-finite".into()));
    }
    Ok(ClientUpdate { params, report, sample_count: ctx.stage_indices.len(), losses })
}
