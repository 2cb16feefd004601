//! The round loop: client selection, parallel local training, aggregation
//! and periodic evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_train, ClientConfig, ClientContext, ClientUpdate, RadiusNorm, ReprConfig};
use crate::data::{DatasetSource, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::fractal::{build_pretrain_dataset, FractalConfig};
use crate::nn::{AdamConfig, EncoderArch, LrSchedule, ModelArch, ModelParams};
use crate::pretrain::{pretrain, slice_head, PretrainConfig};
use crate::rng;
use crate::server::{aggregate_models, aggregate_prototypes, sample_clients, ClientReport, ModelWeighting, PrototypeStore, ServerState};
use crate::splitgen::{active_task, FederatedSplit};

/// Environment variable holding the client worker count.
pub const WORKERS_ENV: &str = "FEDSPACE_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub proto_aggr: bool,
    pub pretrain: bool,
    pub repr_loss: bool,
    pub server_aggr: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { proto_aggr: true, pretrain: true, repr_loss: true, server_aggr: true }
    }
}

impl AblationFlags {
    pub fn none() -> Self {
        Self { proto_aggr: false, pretrain: false, repr_loss: false, server_aggr: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSetup {
    pub fractals: FractalConfig,
    pub training: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub total_rounds: usize,
    pub clients_per_round: usize,
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub beta: f64,
    pub rho: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub flags: AblationFlags,
    pub seed: u64,
    pub eval_period: usize,
    pub encoder: EncoderArch,
    /// Defaults to on for image data, off otherwise.
    pub label_augment: Option<bool>,
    pub radius_norm: RadiusNorm,
    pub repr: ReprConfig,
    pub model_weighting: ModelWeighting,
    pub pretrain: PretrainSetup,
    /// Overrides the environment worker count.
    pub workers: Option<usize>,
    pub dataset: Option<DatasetSource>,
    pub split: Option<PathBuf>,
    pub theta0: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            total_rounds: 5000,
            clients_per_round: 5,
            lambda_p: 1e-2,
            lambda_r: 1e-2,
            beta: 0.1,
            rho: 0.5,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            batch_size: 64,
            local_epochs: 1,
            flags: AblationFlags::default(),
            seed: 0,
            eval_period: 10,
            encoder: EncoderArch::Conv { in_channels: 3, image_size: 32, channels: vec![32, 64, 128], feature_dim: 128 },
            label_augment: None,
            radius_norm: RadiusNorm::default(),
            repr: ReprConfig::default(),
            model_weighting: ModelWeighting::default(),
            pretrain: PretrainSetup::default(),
            workers: None,
            dataset: None,
            split: None,
            theta0: None,
            out_dir: None,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients_per_round == 0 {
            return bad("clients_per_round must be positive".into());
        }
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_r", self.lambda_r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        for (name, v) in [("beta", self.beta), ("rho", self.rho)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.schedule.base_lr > 0.0 && self.schedule.base_lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.schedule.base_lr));
        }
        if self.batch_size == 0 || self.local_epochs == 0 || self.eval_period == 0 {
            return bad("batch_size, local_epochs and eval_period must be positive".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        Ok(())
    }

    fn effective_rho(&self) -> f64 {
        if self.flags.server_aggr {
            self.rho
        } else {
            1.0
        }
    }

    pub fn client_config(&self, label_augment: bool) -> ClientConfig {
        ClientConfig {
            lambda_p: self.lambda_p,
            lambda_r: if self.flags.repr_loss { self.lambda_r } else { 0.0 },
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            adam: self.adam,
            label_augment,
            radius_norm: self.radius_norm,
            repr: self.repr,
        }
    }

    fn workers(&self) -> Option<usize> {
        self.workers.or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0))
    }
}

/// One record per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Partition index of each selected client's active task.
    pub tasks: Vec<Option<usize>>,
    pub stage_samples: Vec<usize>,
    pub ce: f64,
    pub lp: f64,
    pub lr: f64,
    pub accuracy: Option<f64>,
    pub wall_ms: f64,
}

/// Initial global model: random, or a pretrained encoder with a sliced head.
pub fn initial_model(config: &SimConfig, num_classes: usize, label_augment: bool, theta0: Option<&ModelParams>) -> Result<ModelParams> {
    let outputs = if label_augment { 4 * num_classes } else { num_classes };
    let arch = ModelArch { encoder: config.encoder.clone(), num_outputs: outputs, rotation_head: label_augment };
    if !config.flags.pretrain {
        return ModelParams::init(arch, &mut rng::stream(config.seed, "init", &[]));
    }
    let pretrained = match theta0 {
        Some(p) => p.clone(),
        None => {
            let EncoderArch::Conv { in_channels, .. } = config.encoder else {
                return Err(Error::Config("fractal pretraining needs a conv encoder or a theta0 checkpoint".into()));
            };
            let setup = &config.pretrain;
            let fractals = build_pretrain_dataset(&setup.fractals)?.to_dataset(in_channels)?;
            let pre_arch = ModelArch {
                encoder: config.encoder.clone(),
                num_outputs: fractals.num_classes().max(outputs),
                rotation_head: false,
            };
            let init = ModelParams::init(pre_arch, &mut rng::stream(config.seed, "pretrain-init", &[]))?;
            let (p, report) = pretrain(init, &fractals, &setup.training)?;
            log::info!("fractal pretraining: train accuracy {:.3}", report.train_accuracy);
            p
        }
    };
    if pretrained.arch.encoder != config.encoder {
        return Err(Error::Config("pretrained encoder does not match the configured encoder".into()));
    }
    slice_head(&pretrained, outputs, label_augment)
}

/// A running simulation. The orchestrating thread owns the server state;
/// client work fans out to a worker pool.
pub struct Simulation<'a> {
    pub config: SimConfig,
    pub split: &'a FederatedSplit,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub state: ServerState,
    /// Per-client prototype stores used when prototype aggregation is off.
    pub local_stores: Vec<PrototypeStore>,
    client_config: ClientConfig,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        config: SimConfig,
        split: &'a FederatedSplit,
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
        theta0: Option<&ModelParams>,
    ) -> Result<Self> {
        config.validate()?;
        if config.clients_per_round > split.num_clients() {
            return Err(Error::Config(format!(
                "clients_per_round {} exceeds {} clients",
                config.clients_per_round,
                split.num_clients()
            )));
        }
        if config.total_rounds > split.config.total_rounds {
            return Err(Error::Config(format!(
                "{} rounds requested but the split covers {}",
                config.total_rounds, split.config.total_rounds
            )));
        }
        if config.encoder.input_shape() != train.shape().dims() || train.shape() != test.shape() {
            return Err(Error::Config(format!(
                "encoder input {:?} does not match data {:?}",
                config.encoder.input_shape(),
                train.shape().dims()
            )));
        }
        split.validate(train.labels())?;
        let num_classes = split.config.num_classes().max(train.num_classes()).max(test.num_classes());
        let label_augment = config.label_augment.unwrap_or(train.shape().is_image());
        let params = initial_model(&config, num_classes, label_augment, theta0)?;
        let pool = match config.workers() {
            Some(n) => Some(rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Config(e.to_string()))?),
            None => None,
        };
        let state = ServerState {
            params,
            store: PrototypeStore::default(),
            round: 0,
            rho: config.effective_rho(),
            beta: config.beta,
            clients_per_round: config.clients_per_round,
        };
        Ok(Self {
            client_config: config.client_config(label_augment),
            local_stores: vec![PrototypeStore::default(); split.num_clients()],
            config,
            split,
            train,
            test,
            state,
            pool,
        })
    }

    fn train_client(&self, k: usize, round: usize) -> Result<ClientUpdate> {
        let client = &self.split.clients[k];
        let classes = active_task(&client.stream, round)?;
        let indices = client.stage_indices(classes);
        let store = if self.config.flags.proto_aggr { &self.state.store } else { &self.local_stores[k] };
        let ctx = ClientContext {
            client_id: client.client_id,
            round,
            data: self.train,
            stage_indices: &indices,
            active_classes: classes,
            store,
        };
        let mut rng = rng::stream(self.config.seed, "client", &[round as u64, k as u64]);
        local_train(&self.state.params, &ctx, &self.client_config, &mut rng)
            .map_err(|e| Error::Client { client: k, round, source: Box::new(e) })
    }

    /// Runs round `state.round + 1`. A failing client aborts the round
    /// before anything is aggregated.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        let round = self.state.round + 1;
        if round > self.config.total_rounds {
            return Err(Error::RoundOutOfRange { round, total: self.config.total_rounds });
        }
        let start = Instant::now();
        let selected = sample_clients(self.split.num_clients(), self.config.clients_per_round, self.config.seed, round)?;
        let this = &*self;
        let updates: Vec<ClientUpdate> = match &self.pool {
            Some(pool) if pool.current_num_threads() == 1 => {
                selected.iter().map(|&k| this.train_client(k, round)).collect::<Result<_>>()?
            }
            Some(pool) => pool.install(|| selected.par_iter().map(|&k| this.train_client(k, round)).collect::<Result<_>>())?,
            None => selected.par_iter().map(|&k| this.train_client(k, round)).collect::<Result<_>>()?,
        };

        let models: Vec<(&ModelParams, usize)> = updates.iter().map(|u| (&u.params, u.sample_count)).collect();
        let params = aggregate_models(&self.state.params, &models, self.state.rho, self.config.model_weighting)?;
        if self.config.flags.proto_aggr {
            let reports: Vec<&ClientReport> = updates.iter().map(|u| &u.report).collect();
            aggregate_prototypes(&mut self.state.store, &reports, self.config.beta, round)?;
        } else {
            for (&k, u) in selected.iter().zip(&updates) {
                aggregate_prototypes(&mut self.local_stores[k], &[&u.report], self.config.beta, round)?;
            }
        }
        self.state.params = params;
        self.state.round = round;

        let live: Vec<&ClientUpdate> = updates.iter().filter(|u| u.sample_count > 0).collect();
        let mean = |f: &dyn Fn(&ClientUpdate) -> f64| {
            if live.is_empty() {
                0.0
            } else {
                live.iter().map(|u| f(u)).sum::<f64>() / live.len() as f64
            }
        };
        let tasks = selected
            .iter()
            .map(|&k| active_task(&self.split.clients[k].stream, round).ok().and_then(|t| self.split.task_id(t)))
            .collect();
        let accuracy = if round.is_multiple_of(self.config.eval_period) || round == self.config.total_rounds {
            Some(evaluate(&self.state.params, self.test)?)
        } else {
            None
        };
        Ok(RoundLog {
            round,
            tasks,
            stage_samples: updates.iter().map(|u| u.sample_count).collect(),
            ce: mean(&|u| u.losses.mean_ce()),
            lp: mean(&|u| u.losses.mean_lp()),
            lr: mean(&|u| u.losses.mean_lr()),
            accuracy,
            selected,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn run(&mut self) -> Result<Vec<RoundLog>> {
        let mut logs = Vec::with_capacity(self.config.total_rounds);
        while self.state.round < self.config.total_rounds {
            let log = self.run_round()?;
            if let Some(acc) = log.accuracy {
                log::info!("round {}: acc {acc:.4} ce {:.4} lp {:.4} lr {:.4}", log.round, log.ce, log.lp, log.lr);
            }
            logs.push(log);
        }
        Ok(logs)
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub logs: Vec<RoundLog>,
    pub state: ServerState,
}

pub fn run_simulation(
    config: &SimConfig,
    split: &FederatedSplit,
    train: &LabeledDataset,
    test: &LabeledDataset,
    theta0: Option<&ModelParams>,
) -> Result<SimOutput> {
    let mut sim = Simulation::new(config.clone(), split, train, test, theta0)?;
    let logs = sim.run()?;
    Ok(SimOutput { logs, state: sim.state })
}
