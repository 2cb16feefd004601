//! Server side: client sampling, model and prototype aggregation, state
//! checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::client::{Prototype, RadiusStat};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_params, write_params};
use crate::nn::ModelParams;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoEntry {
    pub mean: Vec<f64>,
    pub last_update: usize,
}

/// Global prototypes keyed by class plus the shared augmentation radius.
/// Its key set is the set of discovered classes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub entries: BTreeMap<usize, ProtoEntry>,
    pub radius: Option<f64>,
}

impl PrototypeStore {
    pub fn discovered(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(&class).map(|e| e.mean.as_slice())
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.mean.len())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// What a client uploads besides its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub prototypes: Vec<Prototype>,
    pub radius: Option<RadiusStat>,
}

/// `K` distinct clients drawn uniformly without replacement, ascending.
/// The draw depends only on `(seed, round)`.
pub fn sample_clients(n: usize, k: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot select {k} of {n} clients")));
    }
    let mut rng = rng::stream(seed, "select", &[round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelWeighting {
    /// `w_k = n_k / Σ_j n_j` over the participating clients.
    #[default]
    Convex,
    /// `w_k = n_k / Σ_{j≤k} n_j`, the running prefix sum in selection order.
    RunningPrefix,
}

pub fn model_weights(counts: &[usize], weighting: ModelWeighting) -> Vec<f64> {
    match weighting {
        ModelWeighting::Convex => {
            let total: usize = counts.iter().sum();
            counts.iter().map(|&n| n as f64 / total as f64).collect()
        }
        ModelWeighting::RunningPrefix => {
            let mut prefix = 0usize;
            counts
                .iter()
                .map(|&n| {
                    prefix += n;
                    n as f64 / prefix as f64
                })
                .collect()
        }
    }
}

/// `θ = ρ·Σ_k w_k θ_k + (1 − ρ)·θ_prev`, evaluated as
/// `θ_prev + ρ·Σ_k w_k (θ_k − θ_prev)` so unchanged clients leave `θ_prev`
/// bit-identical. Clients with zero samples are skipped; with none left the
/// previous model is returned.
pub fn aggregate_models(
    prev: &ModelParams,
    updates: &[(&ModelParams, usize)],
    rho: f64,
    weighting: ModelWeighting,
) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho {rho} outside [0, 1]")));
    }
    let live: Vec<&(&ModelParams, usize)> = updates.iter().filter(|(_, n)| *n > 0).collect();
    if live.is_empty() {
        return Ok(prev.clone());
    }
    if let Some((p, _)) = live.iter().find(|(p, _)| !p.congruent(prev)) {
        return Err(Error::Shape(format!("client model {:?} not congruent with server model", p.arch)));
    }
    let counts: Vec<usize> = live.iter().map(|(_, n)| *n).collect();
    let weights = model_weights(&counts, weighting);
    let mut out = prev.clone();
    let sources: Vec<Vec<&[f64]>> = live.iter().map(|(p, _)| p.tensors().map(|(_, t)| t.data()).collect()).collect();
    for (ti, dst) in out.tensors_mut().enumerate() {
        for (e, v) in dst.data_mut().iter_mut().enumerate() {
            let base = *v;
            let mut acc = 0.0;
            for (src, w) in sources.iter().zip(&weights) {
                acc += w * (src[ti][e] - base);
            }
            *v = base + rho * acc;
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("aggregated model is not finite".into()));
    }
    Ok(out)
}

/// Count-weighted per-class mean of the reported prototypes; a new class
/// takes the mean directly, a known one moves by `β·v + (1 − β)·e`. The
/// radius is blended the same way from the sample-weighted client radii.
pub fn aggregate_prototypes(store: &mut PrototypeStore, reports: &[&ClientReport], beta: f64, round: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
    }
    let mut dim = store.dim();
    let mut per_class: BTreeMap<usize, Vec<&Prototype>> = BTreeMap::new();
    for r in reports {
        for p in &r.prototypes {
            if p.support_count == 0 {
                continue;
            }
            if *dim.get_or_insert(p.mean.len()) != p.mean.len() {
                return Err(Error::Dimension(format!(
                    "client {} prototype for class {} has dimension {}, expected {}",
                    r.client_id,
                    p.class_id,
                    p.mean.len(),
                    dim.unwrap_or_default()
                )));
            }
            per_class.entry(p.class_id).or_default().push(p);
        }
    }
    for (class, protos) in per_class {
        let total: usize = protos.iter().map(|p| p.support_count).sum();
        let mut v = vec![0.0; protos[0].mean.len()];
        for p in &protos {
            let w = p.support_count as f64 / total as f64;
            for (a, b) in v.iter_mut().zip(&p.mean) {
                *a += w * b;
            }
        }
        match store.entries.get_mut(&class) {
            Some(entry) => {
                for (e, n) in entry.mean.iter_mut().zip(&v) {
                    *e = beta * n + (1.0 - beta) * *e;
                }
                entry.last_update = round;
            }
            None => {
                store.entries.insert(class, ProtoEntry { mean: v, last_update: round });
            }
        }
    }
    let radii: Vec<&RadiusStat> = reports.iter().filter_map(|r| r.radius.as_ref()).filter(|r| r.support_count > 0).collect();
    let support: usize = radii.iter().map(|r| r.support_count).sum();
    if support > 0 {
        let mean: f64 = radii.iter().map(|r| r.support_count as f64 / support as f64 * r.radius).sum();
        store.radius = Some(match store.radius {
            Some(old) => beta * mean + (1.0 - beta) * old,
            None => mean,
        });
    }
    Ok(())
}

/// Everything needed to resume a run after `round`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ModelParams,
    pub store: PrototypeStore,
    pub round: usize,
    pub rho: f64,
    pub beta: f64,
    pub clients_per_round: usize,
}

const SERVER_MAGIC: &[u8; 8] = b"FSSERVER";
pub const SERVER_VERSION: u32 = 1;

pub fn write_server_state(w: &mut impl Write, s: &ServerState) -> Result<()> {
    w.write_all(SERVER_MAGIC)?;
    put_u32(w, SERVER_VERSION)?;
    put_u64(w, s.round as u64)?;
    put_f64(w, s.rho)?;
    put_f64(w, s.beta)?;
    put_len(w, s.clients_per_round)?;
    write_params(w, &s.params)?;
    put_u32(w, u32::from(s.store.radius.is_some()))?;
    put_f64(w, s.store.radius.unwrap_or(0.0))?;
    put_len(w, s.store.entries.len())?;
    for (&c, e) in &s.store.entries {
        put_len(w, c)?;
        put_u64(w, e.last_update as u64)?;
        put_len(w, e.mean.len())?;
        for &v in &e.mean {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_server_state(r: &mut impl Read) -> Result<ServerState> {
    expect_magic(r, SERVER_MAGIC)?;
    expect_version(r, SERVER_VERSION)?;
    let round = get_u64(r)? as usize;
    let rho = get_f64(r)?;
    let beta = get_f64(r)?;
    let clients_per_round = get_u32(r)? as usize;
    let params = read_params(r)?;
    let has_radius = get_u32(r)? != 0;
    let radius = get_f64(r)?;
    let n = get_u32(r)? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..n {
        let c = get_u32(r)? as usize;
        let last_update = get_u64(r)? as usize;
        let d = get_u32(r)? as usize;
        if d > 1 << 20 {
            return Err(Error::Schema(format!("prototype dimension {d} too large")));
        }
        let mean = (0..d).map(|_| get_f64(r)).collect::<Result<_>>()?;
        entries.insert(c, ProtoEntry { mean, last_update });
    }
    let store = PrototypeStore { entries, radius: has_radius.then_some(radius) };
    Ok(ServerState { params, store, round, rho, beta, clients_per_round })
}

pub fn save_server_state(path: impl AsRef<Path>, s: &ServerState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_server_state(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load_server_state(path: impl AsRef<Path>) -> Result<ServerState> {
    let path = path.as_ref();
    read_server_state(&mut BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Corrupt { path: path.to_path_buf(), reason: "truncated".into() }
        }
        other => other,
    })
}
