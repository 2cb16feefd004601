use fedspace::client::{
    augment_prototype, class_statistics, local_train, prototypes_from_features, representation_loss, sample_step_inputs, step_loss,
    ClientConfig, ClientContext, NegativeMode, Prototype, RadiusNorm, ReprConfig, StepInputs,
};
use fedspace::data::{LabeledDataset, SampleShape, SplitTag};
use fedspace::eval::evaluate;
use fedspace::nn::loss::softmax_cross_entropy;
use fedspace::nn::optim::LrSchedule;
use fedspace::nn::{classify, encode, EncoderArch, Graph, ModelArch, ModelParams};
use fedspace::rng;
use fedspace::server::{aggregate_prototypes, ClientReport, PrototypeStore};
use fedspace::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_images(n: usize, classes: usize, side: usize, seed: u64) -> LabeledDataset {
    let mut rng = rng::stream(seed, "images", &[]);
    let samples: Vec<f64> = (0..n * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let shape = SampleShape::Image { channels: 1, height: side, width: side };
    LabeledDataset::new(shape, samples, labels, classes, SplitTag::Train).unwrap()
}

/// Two well separated Gaussian clouds in 2-d plus distractor classes.
fn separable(n_per_class: usize, seed: u64) -> LabeledDataset {
    let mut rng = rng::stream(seed, "blobs", &[]);
    let centers = [[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0], [0.0, -3.0]];
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for m in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                samples.push(m + 0.5 * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(SampleShape::Vector { dim: 2 }, samples, labels, 4, SplitTag::Train).unwrap()
}

fn conv_model(classes: usize, rotation: bool, seed: u64) -> ModelParams {
    let arch = ModelArch {
        encoder: EncoderArch::Conv { in_channels: 1, image_size: 8, channels: vec![2, 3], feature_dim: 5 },
        num_outputs: if rotation { 4 * classes } else { classes },
        rotation_head: rotation,
    };
    ModelParams::init(arch, &mut rng::stream(seed, "init", &[])).unwrap()
}

fn mlp_model(input: usize, classes: usize, seed: u64) -> ModelParams {
    let arch = ModelArch {
        encoder: EncoderArch::Mlp { input_dim: input, hidden: vec![16], feature_dim: 8, final_relu: false },
        num_outputs: classes,
        rotation_head: false,
    };
    ModelParams::init(arch, &mut rng::stream(seed, "init", &[])).unwrap()
}

fn store_with(classes: &[usize], dim: usize, radius: f64, seed: u64) -> PrototypeStore {
    let mut rng = rng::stream(seed, "store", &[]);
    let prototypes = classes
        .iter()
        .map(|&c| Prototype { class_id: c, mean: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), support_count: 3 })
        .collect();
    let report = ClientReport { client_id: 0, prototypes, radius: Some(fedspace::client::RadiusStat { radius, support_count: 9 }) };
    let mut store = PrototypeStore::default();
    aggregate_prototypes(&mut store, &[&report], 0.1, 1).unwrap();
    store
}

fn nudge(p: &ModelParams, i: usize, delta: f64) -> ModelParams {
    let mut q = p.clone();
    let mut offset = 0;
    for t in q.tensors_mut() {
        if i < offset + t.len() {
            t.data_mut()[i - offset] += delta;
            break;
        }
        offset += t.len();
    }
    q
}

fn total_loss(params: &ModelParams, step: &StepInputs, cfg: &ClientConfig) -> f64 {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = step_loss(&mut g, params, &bound, step, cfg).unwrap();
    g.value(loss.total).item()
}

fn conv_step(mode: NegativeMode) -> (ModelParams, StepInputs, ClientConfig) {
    let data = random_images(12, 4, 8, 3);
    let params = conv_model(4, true, 5);
    let store = store_with(&[0, 2, 3], 5, 0.3, 7);
    let indices: Vec<usize> = (0..12).filter(|i| data.labels()[*i] < 2).collect();
    let ctx = ClientContext { client_id: 0, round: 3, data: &data, stage_indices: &indices, active_classes: &[0, 1], store: &store };
    let cfg = ClientConfig {
        lambda_p: 0.3,
        lambda_r: 0.7,
        label_augment: true,
        repr: ReprConfig { negatives: mode, ..Default::default() },
        ..Default::default()
    };
    let step = sample_step_inputs(&params, &ctx, &indices, &cfg, &mut rng::stream(1, "step", &[])).unwrap();
    (params, step, cfg)
}

#[test]
fn conv_rotation_step_matches_finite_differences() {
    for mode in [NegativeMode::PerVector, NegativeMode::ClassMean] {
        let (params, step, cfg) = conv_step(mode);
        assert!(step.proto_batch.is_some() && step.repr_extras.is_some());
        assert_eq!(step.inputs.shape()[0], 4 * 6);

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let loss = step_loss(&mut g, &params, &bound, &step, &cfg).unwrap();
        assert!(loss.lp > 0.0 && loss.lr > 0.0);
        let grad = bound.gradients(&g.backward(loss.total).unwrap(), &params).unwrap().flat();

        let h = 1e-6;
        let n = params.num_scalars();
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(3) {
            let fd = (total_loss(&nudge(&params, i, h), &step, &cfg) - total_loss(&nudge(&params, i, -h), &step, &cfg)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{mode:?}: worst relative error {worst:e}");
    }
}

#[test]
fn composite_gradient_is_weighted_sum_of_terms() {
    let (params, step, cfg) = conv_step(NegativeMode::PerVector);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = step_loss(&mut g, &params, &bound, &step, &cfg).unwrap();
    let of = |v| bound.gradients(&g.backward(v).unwrap(), &params).unwrap().flat();
    let total = of(loss.total);
    let ce = of(loss.ce_var);
    let lp = of(loss.lp_var.unwrap());
    let lr = of(loss.lr_var.unwrap());
    for i in 0..total.len() {
        let sum = ce[i] + cfg.lambda_p * lp[i] + cfg.lambda_r * lr[i];
        assert!((total[i] - sum).abs() < 1e-12 * (1.0 + total[i].abs()));
    }
    let value = loss.ce + cfg.lambda_p * loss.lp + cfg.lambda_r * loss.lr;
    assert!((g.value(loss.total).item() - value).abs() < 1e-12);
}

#[test]
fn prototype_loss_replays_from_the_same_stream() {
    let data = separable(10, 1);
    let params = mlp_model(2, 4, 2);
    let store = store_with(&[1, 2, 3], 8, 0.25, 4);
    let indices: Vec<usize> = (0..40).filter(|i| data.labels()[*i] == 0).collect();
    let ctx = ClientContext { client_id: 0, round: 1, data: &data, stage_indices: &indices, active_classes: &[0, 1], store: &store };
    let cfg = ClientConfig { lambda_r: 0.0, ..Default::default() };
    let batch = &indices[..6];
    let step = sample_step_inputs(&params, &ctx, batch, &cfg, &mut rng::stream(8, "s", &[])).unwrap();

    // classes outside the active task, uniform with replacement
    let old = [2usize, 3];
    let mut replay = rng::stream(8, "s", &[]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..batch.len() {
        let c = old[replay.random_range(0..old.len())];
        rows.extend(augment_prototype(store.get(c).unwrap(), 0.25, &mut replay));
        labels.push(c);
    }
    let protos = Tensor::from_vec(&[batch.len(), 8], rows).unwrap();
    let (per_row, _) = softmax_cross_entropy(&classify(&params, &protos).unwrap(), &labels).unwrap();
    let expected: f64 = per_row.iter().sum();

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = step_loss(&mut g, &params, &bound, &step, &cfg).unwrap();
    assert!((loss.lp - expected).abs() < 1e-12, "{} vs {expected}", loss.lp);
    assert_eq!(loss.lr, 0.0);
}

#[test]
fn cold_start_has_no_prototype_terms() {
    let data = separable(20, 2);
    let params = mlp_model(2, 4, 3);
    let store = PrototypeStore::default();
    let indices: Vec<usize> = (0..80).filter(|i| data.labels()[*i] < 2).collect();
    let ctx = ClientContext { client_id: 0, round: 1, data: &data, stage_indices: &indices, active_classes: &[0, 1], store: &store };
    let cfg = ClientConfig { batch_size: 16, ..Default::default() };
    let step = sample_step_inputs(&params, &ctx, &indices[..16], &cfg, &mut rng::stream(0, "s", &[])).unwrap();
    assert!(step.proto_batch.is_none() && step.repr_extras.is_none());

    // a store holding only active classes contributes no old prototypes
    let active_only = store_with(&[0, 1], 8, 0.1, 1);
    let ctx = ClientContext { store: &active_only, ..ctx };
    let step = sample_step_inputs(&params, &ctx, &indices[..16], &cfg, &mut rng::stream(0, "s", &[])).unwrap();
    assert!(step.proto_batch.is_none());
    let out = local_train(&params, &ctx, &cfg, &mut rng::stream(0, "c", &[])).unwrap();
    assert!(out.losses.lp.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_weights_ignore_the_store() {
    let data = separable(20, 3);
    let params = mlp_model(2, 4, 4);
    let indices: Vec<usize> = (0..80).filter(|i| data.labels()[*i] >= 2).collect();
    let cfg = ClientConfig { lambda_p: 0.0, lambda_r: 0.0, batch_size: 8, ..Default::default() };
    let empty = PrototypeStore::default();
    let full = store_with(&[0, 1, 2], 8, 0.5, 2);
    let run = |store: &PrototypeStore| {
        let ctx = ClientContext { client_id: 1, round: 4, data: &data, stage_indices: &indices, active_classes: &[2, 3], store };
        local_train(&params, &ctx, &cfg, &mut rng::stream(9, "c", &[])).unwrap()
    };
    let a = run(&empty);
    let b = run(&full);
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn statistics_come_from_the_received_model() {
    let data = separable(25, 4);
    let params = mlp_model(2, 4, 5);
    let store = store_with(&[3], 8, 0.2, 3);
    let indices: Vec<usize> = (0..100).filter(|i| data.labels()[*i] < 2).collect();
    let ctx = ClientContext { client_id: 0, round: 2, data: &data, stage_indices: &indices, active_classes: &[0, 1], store: &store };
    let cfg = ClientConfig { schedule: LrSchedule { base_lr: 1e-2, halve_every: 1000 }, batch_size: 10, ..Default::default() };
    let out = local_train(&params, &ctx, &cfg, &mut rng::stream(2, "c", &[])).unwrap();
    assert_ne!(out.params, params);

    let (x, y) = data.batch(&indices);
    let expected = prototypes_from_features(&encode(&params, &x).unwrap(), &y);
    assert_eq!(out.report.prototypes, expected);
    let after = prototypes_from_features(&encode(&out.params, &x).unwrap(), &y);
    assert_ne!(out.report.prototypes, after);
    let classes: Vec<usize> = out.report.prototypes.iter().map(|p| p.class_id).collect();
    assert_eq!(classes, vec![0, 1]);
    let (_, radius) = class_statistics(&params, &data, &indices, RadiusNorm::PerClass).unwrap();
    assert_eq!(out.report.radius, radius);
    assert_eq!(out.sample_count, indices.len());
}

#[test]
fn client_round_is_reproducible() {
    let data = random_images(16, 4, 8, 6);
    let params = conv_model(4, true, 6);
    let store = store_with(&[2, 3], 5, 0.3, 6);
    let indices: Vec<usize> = (0..16).filter(|i| data.labels()[*i] < 2).collect();
    let ctx = ClientContext { client_id: 2, round: 9, data: &data, stage_indices: &indices, active_classes: &[0, 1], store: &store };
    let cfg = ClientConfig { label_augment: true, batch_size: 4, ..Default::default() };
    let a = local_train(&params, &ctx, &cfg, &mut rng::stream(5, "c", &[9, 2])).unwrap();
    let b = local_train(&params, &ctx, &cfg, &mut rng::stream(5, "c", &[9, 2])).unwrap();
    assert_eq!(a, b);
    let c = local_train(&params, &ctx, &cfg, &mut rng::stream(5, "c", &[9, 3])).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn separable_stage_is_learned() {
    let data = separable(100, 5);
    let params = mlp_model(2, 4, 6);
    let store = PrototypeStore::default();
    let indices: Vec<usize> = (0..400).filter(|i| data.labels()[*i] < 2).collect();
    let ctx = ClientContext { client_id: 0, round: 1, data: &data, stage_indices: &indices, active_classes: &[0, 1], store: &store };
    let cfg = ClientConfig { local_epochs: 20, batch_size: 16, schedule: LrSchedule { base_lr: 1e-3, halve_every: 1000 }, ..Default::default() };
    let out = local_train(&params, &ctx, &cfg, &mut rng::stream(0, "c", &[])).unwrap();
    let (x, y) = data.batch(&indices);
    let stage = LabeledDataset::new(SampleShape::Vector { dim: 2 }, x.data().to_vec(), y, 4, SplitTag::Train).unwrap();
    let acc = evaluate(&out.params, &stage).unwrap();
    assert!(acc > 0.95, "stage accuracy {acc}");
}

#[test]
fn empty_stage_returns_the_received_model() {
    let data = separable(5, 6);
    let params = mlp_model(2, 4, 7);
    let store = PrototypeStore::default();
    let ctx = ClientContext { client_id: 0, round: 1, data: &data, stage_indices: &[], active_classes: &[0], store: &store };
    let out = local_train(&params, &ctx, &ClientConfig::default(), &mut rng::stream(0, "c", &[])).unwrap();
    assert_eq!(out.params, params);
    assert_eq!(out.sample_count, 0);
    assert!(out.report.prototypes.is_empty() && out.report.radius.is_none());
}

#[test]
fn non_finite_inputs_abort_with_numeric_error() {
    let mut data = separable(5, 7);
    let mut samples: Vec<f64> = (0..data.len()).flat_map(|i| data.sample(i).to_vec()).collect();
    samples[0] = f64::NAN;
    data = LabeledDataset::new(SampleShape::Vector { dim: 2 }, samples, data.labels().to_vec(), 4, SplitTag::Train).unwrap();
    let params = mlp_model(2, 4, 8);
    let store = PrototypeStore::default();
    let indices: Vec<usize> = (0..data.len()).filter(|i| data.labels()[*i] == 0).collect();
    let ctx = ClientContext { client_id: 0, round: 1, data: &data, stage_indices: &indices, active_classes: &[0], store: &store };
    let err = local_train(&params, &ctx, &ClientConfig::default(), &mut rng::stream(0, "c", &[])).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err:?}");
}

#[test]
fn augmentation_moments() {
    let mean = [0.5, -1.0, 2.0];
    let r = 0.7;
    let n = 10_000;
    let mut rng = rng::stream(3, "aug", &[]);
    let draws: Vec<Vec<f64>> = (0..n).map(|_| augment_prototype(&mean, r, &mut rng)).collect();
    for (j, m) in mean.iter().enumerate() {
        let mu = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d[j] - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mu - m).abs() < 3.0 * r / (n as f64).sqrt());
        assert!((sd / r - 1.0).abs() < 0.05);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn representation_loss_is_nonnegative(seed in any::<u64>(), n in 1usize..12, d in 1usize..6, per_class_mean in any::<bool>()) {
        let mut rng = rng::stream(seed, "pool", &[]);
        let pool: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let cfg = ReprConfig { negatives: if per_class_mean { NegativeMode::ClassMean } else { NegativeMode::PerVector }, ..Default::default() };
        let pool = Tensor::from_vec(&[n, d], pool).unwrap();
        let (value, grad) = representation_loss(&pool, &labels, &[0, 1], 2.0, &cfg).unwrap();
        prop_assert!(value >= 0.0 && value.is_finite());
        prop_assert!(grad.is_finite());
        // the loss depends on directions only, as long as no class mean
        // is near the ε guard
        let mean_norm = |c: usize| {
            let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            (0..d).map(|k| rows.iter().map(|&i| pool.data()[i * d + k]).sum::<f64>().powi(2)).sum::<f64>().sqrt() / rows.len().max(1) as f64
        };
        if per_class_mean && (0..4).any(|c| labels.contains(&c) && mean_norm(c) < 1e-6) {
            return Ok(());
        }
        let scaled = Tensor::from_vec(&[n, d], pool.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let (again, _) = representation_loss(&scaled, &labels, &[0, 1], 2.0, &cfg).unwrap();
        prop_assert!((value - again).abs() < 1e-9);
    }
}
