//! Non-IID federated splits with asynchronous per-client task streams.
//!
//! Construction: client sizes follow a power law over ranks, each client's
//! class mix is a Dirichlet draw, and every client walks the shared task
//! partition in its own random order with its own random stage lengths.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const SPLIT_VERSION: u32 = 1;

/// Ordered tasks with their closing rounds. Stage `i` covers rounds
/// `(boundaries[i-1], boundaries[i]]`, with an implicit `boundaries[-1] = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Vec<usize>>,
    pub boundaries: Vec<usize>,
}

impl TaskStream {
    pub fn num_stages(&self) -> usize {
        self.tasks.len()
    }

    /// Stage index active at `round` (1-based rounds).
    pub fn stage_at(&self, round: usize) -> Result<usize> {
        let total = self.boundaries.last().copied().unwrap_or(0);
        if round == 0 || round > total {
            return Err(Error::RoundOutOfRange { round, total });
        }
        Ok(self.boundaries.partition_point(|&b| b < round))
    }

    pub fn validate(&self, num_classes: usize, total_rounds: usize) -> Result<()> {
        if self.tasks.len() != self.boundaries.len() || self.tasks.is_empty() {
            return Err(Error::Constraint(format!(
                "{} tasks vs {} boundaries",
                self.tasks.len(),
                self.boundaries.len()
            )));
        }
        if self.boundaries[0] == 0 || self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Constraint(format!("boundaries not strictly increasing from 1: {:?}", self.boundaries)));
        }
        if *self.boundaries.last().unwrap() > total_rounds {
            return Err(Error::Constraint("last boundary exceeds total rounds".into()));
        }
        for t in &self.tasks {
            if t.is_empty() || t.iter().any(|&c| c >= num_classes) {
                return Err(Error::Constraint(format!("invalid task {t:?}")));
            }
        }
        Ok(())
    }
}

/// The class set a stream trains on at `round`.
pub fn active_task(stream: &TaskStream, round: usize) -> Result<&[usize]> {
    Ok(&stream.tasks[stream.stage_at(round)?])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    #[serde(rename = "id")]
    pub client_id: usize,
    /// class → dataset indices owned by this client
    #[serde(rename = "indices")]
    pub sample_indices: BTreeMap<usize, Vec<usize>>,
    pub stream: TaskStream,
}

impl ClientSplit {
    pub fn num_samples(&self) -> usize {
        self.sample_indices.values().map(Vec::len).sum()
    }

    /// Indices whose class belongs to `classes`, in class then index order.
    pub fn stage_indices(&self, classes: &[usize]) -> Vec<usize> {
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        wanted
            .iter()
            .filter_map(|c| self.sample_indices.get(c))
            .flat_map(|v| v.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(rename = "N")]
    pub n_clients: usize,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub alpha: f64,
    pub exponent: f64,
    pub seed: u64,
    pub total_rounds: usize,
    #[serde(default = "default_min_size")]
    pub min_size: usize,
    #[serde(default)]
    pub min_stage_len: Option<usize>,
    /// Permute class ids before cutting them into tasks.
    #[serde(default)]
    pub shuffle_classes: bool,
    /// Fraction of the training set handed out to clients.
    #[serde(default = "default_fraction")]
    pub assign_fraction: f64,
}

fn default_min_size() -> usize {
    64
}

fn default_fraction() -> f64 {
    1.0
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_clients: 50,
            num_tasks: 10,
            classes_per_task: 10,
            alpha: 3.0,
            exponent: 1.5,
            seed: 0,
            total_rounds: 5000,
            min_size: default_min_size(),
            min_stage_len: None,
            shuffle_classes: false,
            assign_fraction: 1.0,
        }
    }
}

impl SplitConfig {
    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    /// Explicit value, else a tenth of the mean stage length (at least 1).
    pub fn effective_min_stage_len(&self) -> usize {
        self.min_stage_len
            .unwrap_or_else(|| self.total_rounds / (10 * self.num_tasks.max(1)))
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSplit {
    pub config: SplitConfig,
    /// Shared class-to-task partition.
    pub partition: Vec<Vec<usize>>,
    pub clients: Vec<ClientSplit>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    version: u32,
    split: FederatedSplit,
}

impl FederatedSplit {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Position of `task` in the shared partition.
    pub fn task_id(&self, task: &[usize]) -> Option<usize> {
        self.partition.iter().position(|t| t == task)
    }

    /// Checks every structural invariant against a dataset of `dataset_len`
    /// samples with the given labels.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let num_classes = cfg.num_classes();
        if self.clients.len() != cfg.n_clients {
            return Err(Error::Constraint(format!("{} clients, config says {}", self.clients.len(), cfg.n_clients)));
        }
        let mut seen = vec![false; labels.len()];
        for client in &self.clients {
            client.stream.validate(num_classes, cfg.total_rounds)?;
            if *client.stream.boundaries.last().unwrap() != cfg.total_rounds {
                return Err(Error::Constraint(format!("client {} stream does not end at T", client.client_id)));
            }
            let mut tasks = client.stream.tasks.clone();
            tasks.sort();
            let mut expect = self.partition.clone();
            expect.sort();
            if tasks != expect {
                return Err(Error::Constraint(format!("client {} does not cover every task once", client.client_id)));
            }
            let stream_classes: BTreeSet<usize> = client.stream.tasks.iter().flatten().copied().collect();
            for (&c, idx) in &client.sample_indices {
                if !stream_classes.contains(&c) {
                    return Err(Error::Constraint(format!("client {} holds class {c} outside its stream", client.client_id)));
                }
                for &i in idx {
                    if i >= labels.len() || labels[i] != c {
                        return Err(Error::Constraint(format!("client {} index {i} invalid for class {c}", client.client_id)));
                    }
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(Error::Constraint(format!("index {i} assigned twice")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Splits `total` into integer parts proportional to `weights`, flooring
/// each quota and handing the remainder to the largest fractional parts
/// (ties to the lower index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let weights: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        weights.iter().map(|w| w / sum).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    };
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut k = 0;
    while left > 0 {
        out[order[k % order.len()]] += 1;
        left -= 1;
        k += 1;
    }
    out
}

/// Power-law client sizes summing to `total_samples`, each at least
/// `min_size`. Rank `r` (1-based) gets weight `r^(-exponent)` on the part
/// above the floor; ranks are then assigned to clients in random order.
pub fn sample_client_sizes(n_clients: usize, total_samples: usize, exponent: f64, min_size: usize, rng: &mut Stream) -> Result<Vec<usize>> {
    if n_clients == 0 {
        return Err(Error::Constraint("need at least one client".into()));
    }
    if !(exponent >= 0.0 && exponent.is_finite()) {
        return Err(Error::Constraint(format!("exponent {exponent} must be finite and ≥ 0")));
    }
    let floor = n_clients.checked_mul(min_size).filter(|&f| f <= total_samples).ok_or_else(|| {
        Error::Constraint(format!("{n_clients} clients × min_size {min_size} exceeds {total_samples} samples"))
    })?;
    let weights: Vec<f64> = (1..=n_clients).map(|r| (r as f64).powf(-exponent)).collect();
    let extra = largest_remainder(total_samples - floor, &weights);
    let mut by_rank: Vec<usize> = extra.into_iter().map(|e| e + min_size).collect();
    // rank 1 first; shuffle which client gets which rank
    let mut clients: Vec<usize> = (0..n_clients).collect();
    clients.shuffle(rng);
    let mut sizes = vec![0; n_clients];
    for (rank, client) in clients.into_iter().enumerate() {
        sizes[client] = std::mem::take(&mut by_rank[rank]);
    }
    Ok(sizes)
}

fn dirichlet(alpha: f64, k: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Constraint(format!("alpha {alpha}: {e}")))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        Ok(vec![1.0 / k as f64; k])
    }
}

/// Per-client, per-class index lists. Each client draws its own class
/// proportions from a symmetric Dirichlet(`alpha`); counts come from
/// largest-remainder rounding and are filled from shuffled per-class pools
/// without replacement. Shortfalls from exhausted pools are re-spread over
/// classes that still have samples, in proportion to the client's draw.
pub fn dirichlet_partition(dataset: &LabeledDataset, sizes: &[usize], alpha: f64, rng: &mut Stream) -> Result<Vec<Vec<Vec<usize>>>> {
    let requested: usize = sizes.iter().sum();
    if requested > dataset.len() {
        return Err(Error::Capacity { requested, available: dataset.len() });
    }
    if !(alpha > 0.0) {
        return Err(Error::Constraint(format!("alpha {alpha} must be positive")));
    }
    let num_classes = dataset.num_classes();
    let mut pools = dataset.class_pools();
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    // cursor into each pool; pool[cursor..] is still free
    let mut cursor = vec![0usize; num_classes];
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let props = dirichlet(alpha, num_classes, rng)?;
        let mut counts = vec![0usize; num_classes];
        let mut pending = largest_remainder(size, &props);
        loop {
            let mut deficit = 0;
            for c in 0..num_classes {
                let free = pools[c].len() - cursor[c] - counts[c];
                let take = pending[c].min(free);
                counts[c] += take;
                deficit += pending[c] - take;
            }
            if deficit == 0 {
                break;
            }
            let eligible: Vec<f64> = (0..num_classes)
                .map(|c| if pools[c].len() - cursor[c] - counts[c] > 0 { props[c].max(f64::MIN_POSITIVE) } else { 0.0 })
                .collect();
            if eligible.iter().all(|&w| w == 0.0) {
                return Err(Error::Capacity { requested, available: dataset.len() });
            }
            pending = largest_remainder(deficit, &eligible);
        }
        let mut client = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let mut idx = pools[c][cursor[c]..cursor[c] + counts[c]].to_vec();
            idx.sort_unstable();
            cursor[c] += counts[c];
            client.push(idx);
        }
        out.push(client);
    }
    Ok(out)
}

/// Shared class partition plus one independent stream per client.
pub fn build_task_streams(
    n_clients: usize,
    num_tasks: usize,
    classes_per_task: usize,
    total_rounds: usize,
    min_stage_len: usize,
    shuffle_classes: bool,
    rng: &mut Stream,
) -> Result<(Vec<Vec<usize>>, Vec<TaskStream>)> {
    if num_tasks == 0 || classes_per_task == 0 {
        return Err(Error::Constraint("need at least one task with one class".into()));
    }
    if min_stage_len == 0 || num_tasks.checked_mul(min_stage_len).is_none_or(|m| m > total_rounds) {
        return Err(Error::Constraint(format!(
            "{num_tasks} stages of ≥{min_stage_len} rounds do not fit in {total_rounds} rounds"
        )));
    }
    let mut classes: Vec<usize> = (0..num_tasks * classes_per_task).collect();
    if shuffle_classes {
        classes.shuffle(rng);
    }
    let partition: Vec<Vec<usize>> = classes
        .chunks(classes_per_task)
        .map(|c| {
            let mut t = c.to_vec();
            t.sort_unstable();
            t
        })
        .collect();
    let slack = total_rounds - num_tasks * min_stage_len;
    let mut streams = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let mut own = rng::fork(rng);
        let mut order: Vec<usize> = (0..num_tasks).collect();
        order.shuffle(&mut own);
        let mut cuts: Vec<usize> = (0..num_tasks - 1).map(|_| own.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        cuts.push(slack);
        let mut boundaries = Vec::with_capacity(num_tasks);
        let mut prev_cut = 0;
        let mut end = 0;
        for cut in cuts {
            end += min_stage_len + (cut - prev_cut);
            prev_cut = cut;
            boundaries.push(end);
        }
        let tasks = order.iter().map(|&t| partition[t].clone()).collect();
        streams.push(TaskStream { tasks, boundaries });
    }
    Ok((partition, streams))
}

/// Full split for `dataset` under `config`.
pub fn generate_split(dataset: &LabeledDataset, config: &SplitConfig) -> Result<FederatedSplit> {
    if config.num_classes() != dataset.num_classes() {
        return Err(Error::Constraint(format!(
            "{} tasks × {} classes ≠ {} dataset classes",
            config.num_tasks,
            config.classes_per_task,
            dataset.num_classes()
        )));
    }
    if !(config.assign_fraction > 0.0 && config.assign_fraction <= 1.0) {
        return Err(Error::Constraint(format!("assign_fraction {} outside (0, 1]", config.assign_fraction)));
    }
    let total = (dataset.len() as f64 * config.assign_fraction).floor() as usize;
    let sizes = sample_client_sizes(
        config.n_clients,
        total,
        config.exponent,
        config.min_size,
        &mut rng::stream(config.seed, "split-sizes", &[]),
    )?;
    let per_client = dirichlet_partition(dataset, &sizes, config.alpha, &mut rng::stream(config.seed, "split-dirichlet", &[]))?;
    let (partition, streams) = build_task_streams(
        config.n_clients,
        config.num_tasks,
        config.classes_per_task,
        config.total_rounds,
        config.effective_min_stage_len(),
        config.shuffle_classes,
        &mut rng::stream(config.seed, "split-streams", &[]),
    )?;
    let clients = per_client
        .into_iter()
        .zip(streams)
        .enumerate()
        .map(|(client_id, (lists, stream))| ClientSplit {
            client_id,
            sample_indices: lists.into_iter().enumerate().filter(|(_, v)| !v.is_empty()).collect(),
            stream,
        })
        .collect();
    Ok(FederatedSplit { config: config.clone(), partition, clients })
}

pub fn save_split(path: impl AsRef<Path>, split: &FederatedSplit) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &SplitFile { version: SPLIT_VERSION, split: split.clone() })?;
    w.flush()?;
    Ok(())
}

pub fn load_split(path: impl AsRef<Path>) -> Result<FederatedSplit> {
    let path = path.as_ref();
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| Error::Corrupt { path: path.to_path_buf(), reason: e.to_string() })?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SPLIT_VERSION) => {}
        other => return Err(Error::Schema(format!("split version {other:?}, expected {SPLIT_VERSION}"))),
    }
    let file: SplitFile = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    Ok(file.split)
}
