//! Affine IFS codes, chaos-game rendering and labeled fractal datasets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::data::{LabeledDataset, SampleShape, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// Row-major 2×2 linear part.
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl AffineMap {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.b[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.b[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    /// Singular values `(σ_max, σ_min)` of the linear part.
    pub fn singular_values(&self) -> (f64, f64) {
        let fro2: f64 = self.a.iter().flatten().map(|v| v * v).sum();
        let det = self.det();
        let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
        (((fro2 + disc) / 2.0).sqrt(), ((fro2 - disc) / 2.0).max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfsCode {
    pub maps: Vec<AffineMap>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IfsSampling {
    /// Accepted band for the probability-weighted mean of σ_max.
    pub contraction_band: (f64, f64),
    /// Upper bound on every map's σ_max.
    pub contraction_bound: f64,
    /// Maps with `|det A| <` this are degenerate.
    pub det_floor: f64,
    pub max_attempts: usize,
}

impl Default for IfsSampling {
    fn default() -> Self {
        Self { contraction_band: (0.4, 0.8), contraction_bound: 0.95, det_floor: 1e-3, max_attempts: 100_000 }
    }
}

impl IfsCode {
    /// Code with selection probabilities proportional to `|det A_m|`.
    pub fn from_maps(maps: Vec<AffineMap>, det_floor: f64) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Sampling("IFS code needs at least one map".into()));
        }
        let dets: Vec<f64> = maps.iter().map(|m| m.det().abs()).collect();
        if let Some(i) = dets.iter().position(|&d| !(d >= det_floor)) {
            return Err(Error::Sampling(format!("map {i} is degenerate (|det| = {})", dets[i])));
        }
        let sum: f64 = dets.iter().sum();
        let probs = dets.iter().map(|d| d / sum).collect();
        Ok(Self { maps, probs })
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.len() != self.probs.len() || self.maps.is_empty() {
            return Err(Error::Sampling("maps and probs differ in length".into()));
        }
        if self.probs.iter().any(|&p| !(p >= 0.0)) || (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Sampling(format!("probs {:?} are not a distribution", self.probs)));
        }
        Ok(())
    }

    /// Probability-weighted mean of the maps' largest singular values.
    pub fn mean_contraction(&self) -> f64 {
        self.maps.iter().zip(&self.probs).map(|(m, p)| p * m.singular_values().0).sum()
    }

    fn pick(&self, u: f64) -> &AffineMap {
        let mut acc = 0.0;
        for (m, p) in self.maps.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return m;
            }
        }
        self.maps.last().expect("nonempty")
    }

    /// Copy with every matrix and offset entry scaled by `1 + U(-rel, rel)`.
    pub fn jittered(&self, rel: f64, rng: &mut Stream) -> Self {
        let mut out = self.clone();
        for m in &mut out.maps {
            for v in m.a.iter_mut().flatten().chain(m.b.iter_mut()) {
                *v *= 1.0 + rng.random_range(-rel..=rel);
            }
        }
        out
    }
}

/// Samples `num_maps` maps with entries uniform in [-1, 1], rejecting until
/// every map is within the contraction bound, none is degenerate, and the
/// mean contraction falls in the configured band.
pub fn sample_ifs(num_maps: usize, cfg: &IfsSampling, rng: &mut Stream) -> Result<IfsCode> {
    if !(2..=8).contains(&num_maps) {
        return Err(Error::Sampling(format!("num_maps {num_maps} outside [2, 8]")));
    }
    let (lo, hi) = cfg.contraction_band;
    for _ in 0..cfg.max_attempts {
        let maps: Vec<AffineMap> = (0..num_maps)
            .map(|_| AffineMap {
                a: [[rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)], [
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ]],
                b: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            })
            .collect();
        if maps.iter().any(|m| m.singular_values().0 > cfg.contraction_bound) {
            continue;
        }
        let Ok(code) = IfsCode::from_maps(maps, cfg.det_floor) else { continue };
        let c = code.mean_contraction();
        if (lo..=hi).contains(&c) {
            return Ok(code);
        }
    }
    Err(Error::Sampling(format!("no acceptable code after {} attempts", cfg.max_attempts)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub size: usize,
    pub iterations: usize,
    pub burn_in: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { size: 32, iterations: 50_000, burn_in: 100 }
    }
}

const ESCAPE: f64 = 1e10;

/// Chaos-game rendering into a `[1, size, size]` image. The visited points
/// are fitted into the canvas preserving aspect ratio (centered), visit
/// counts are log-scaled and normalized so the brightest cell is 1. Pixel
/// values are rounded to `f32` precision so they survive storage unchanged.
pub fn render_fractal(code: &IfsCode, cfg: &RenderConfig, rng: &mut Stream) -> Result<Tensor> {
    if cfg.iterations < 1000 || cfg.size < 16 {
        return Err(Error::Config(format!(
            "render needs ≥1000 iterations and size ≥16, got {} / {}",
            cfg.iterations, cfg.size
        )));
    }
    code.validate()?;
    let mut p = [0.0, 0.0];
    let mut pts = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.burn_in + cfg.iterations {
        p = code.pick(rng.random::<f64>()).apply(p);
        if !(p[0].abs() < ESCAPE && p[1].abs() < ESCAPE) {
            return Err(Error::Divergence { iterations: it + 1 });
        }
        if it >= cfg.burn_in {
            pts.push(p);
        }
    }
    let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in &pts {
        for k in 0..2 {
            min[k] = min[k].min(q[k]);
            max[k] = max[k].max(q[k]);
        }
    }
    let extent = (max[0] - min[0]).max(max[1] - min[1]);
    let n = cfg.size;
    let cell = |v: f64, lo: f64, hi: f64| -> usize {
        if extent <= 0.0 {
            return n / 2;
        }
        let offset = (extent - (hi - lo)) / 2.0;
        let t = (v - lo + offset) / extent;
        ((t * n as f64) as usize).min(n - 1)
    };
    let mut counts = vec![0u32; n * n];
    for q in &pts {
        let col = cell(q[0], min[0], max[0]);
        let row = cell(q[1], min[1], max[1]);
        counts[row * n + col] += 1;
    }
    let peak = f64::from(counts.iter().copied().max().unwrap_or(0)).ln_1p();
    let data = counts
        .iter()
        .map(|&c| if peak > 0.0 { f64::from((f64::from(c).ln_1p() / peak) as f32) } else { 0.0 })
        .collect();
    Tensor::from_vec(&[1, n, n], data)
}

pub fn nonzero_fraction(image: &Tensor) -> f64 {
    image.data().iter().filter(|&&v| v > 0.0).count() as f64 / image.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractalConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub render: RenderConfig,
    pub sampling: IfsSampling,
    /// Relative per-image jitter of code entries.
    pub jitter: f64,
    /// Accepted nonzero-pixel fraction of a probe render.
    pub coverage_band: (f64, f64),
    pub min_maps: usize,
    pub max_maps: usize,
    pub seed: u64,
}

impl Default for FractalConfig {
    fn default() -> Self {
        Self {
            num_classes: 1000,
            images_per_class: 10,
            render: RenderConfig::default(),
            sampling: IfsSampling::default(),
            jitter: 0.02,
            coverage_band: (0.05, 0.95),
            min_maps: 2,
            max_maps: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractalDataset {
    pub classes: Vec<IfsCode>,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// `[n, 1, size, size]`, class-major.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl FractalDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Grayscale images replicated to `channels`.
    pub fn to_dataset(&self, channels: usize) -> Result<LabeledDataset> {
        let shape = SampleShape::Image { channels: 1, height: self.image_size, width: self.image_size };
        LabeledDataset::new(shape, self.images.data().to_vec(), self.labels.clone(), self.num_classes(), SplitTag::Train)?
            .with_channels(channels)
    }
}

const MAX_CODE_RETRIES: usize = 1000;

fn build_class(class: usize, cfg: &FractalConfig) -> Result<(IfsCode, Vec<Tensor>)> {
    let mut rng = rng::stream(cfg.seed, "fractal-class", &[class as u64]);
    let (lo, hi) = cfg.coverage_band;
    for _ in 0..MAX_CODE_RETRIES {
        let maps = rng.random_range(cfg.min_maps..=cfg.max_maps);
        let code = sample_ifs(maps, &cfg.sampling, &mut rng)?;
        let probe = match render_fractal(&code, &cfg.render, &mut rng) {
            Ok(img) => img,
            Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        if !(lo..=hi).contains(&nonzero_fraction(&probe)) {
            continue;
        }
        let mut images = Vec::with_capacity(cfg.images_per_class);
        let mut ok = true;
        for _ in 0..cfg.images_per_class {
            let variant = code.jittered(cfg.jitter, &mut rng);
            match render_fractal(&variant, &cfg.render, &mut rng) {
                Ok(img) if (lo..=hi).contains(&nonzero_fraction(&img)) => images.push(img),
                Ok(_) | Err(Error::Divergence { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            return Ok((code, images));
        }
    }
    Err(Error::Sampling(format!("no renderable code after {MAX_CODE_RETRIES} retries")))
}

/// One IFS code per class, `images_per_class` jittered renders each.
/// Classes are generated in parallel from independent per-class streams.
pub fn build_pretrain_dataset(cfg: &FractalConfig) -> Result<FractalDataset> {
    if cfg.num_classes == 0 || cfg.images_per_class == 0 {
        return Err(Error::Config("fractal dataset needs ≥1 class and ≥1 image per class".into()));
    }
    if cfg.min_maps > cfg.max_maps {
        return Err(Error::Config("min_maps > max_maps".into()));
    }
    let built: Vec<(IfsCode, Vec<Tensor>)> = (0..cfg.num_classes)
        .into_par_iter()
        .map(|c| build_class(c, cfg).map_err(|e| Error::FractalClass { class: c, source: Box::new(e) }))
        .collect::<Result<_>>()?;
    let size = cfg.render.size;
    let mut data = Vec::with_capacity(cfg.num_classes * cfg.images_per_class * size * size);
    let mut labels = Vec::with_capacity(cfg.num_classes * cfg.images_per_class);
    let mut classes = Vec::with_capacity(cfg.num_classes);
    for (c, (code, imgs)) in built.into_iter().enumerate() {
        for img in imgs {
            data.extend_from_slice(img.data());
            labels.push(c);
        }
        classes.push(code);
    }
    let images = Tensor::from_vec(&[labels.len(), 1, size, size], data)?;
    Ok(FractalDataset { classes, images_per_class: cfg.images_per_class, image_size: size, seed: cfg.seed, images, labels })
}

const FRACTAL_MAGIC: &[u8; 8] = b"FSFRACTL";
pub const FRACTAL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CodesSidecar {
    version: u32,
    seed: u64,
    image_size: usize,
    images_per_class: usize,
    classes: Vec<IfsCode>,
}

/// `fractals.bin` → `fractals.codes.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("codes.json")
}

/// Header (magic, version, classes, images per class, size, channels,
/// seed), then per image a u32 label and `size²` little-endian f32 pixels.
/// IFS codes go to a JSON sidecar.
pub fn save_fractal_dataset(path: impl AsRef<Path>, ds: &FractalDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FRACTAL_MAGIC)?;
    put_u32(&mut w, FRACTAL_VERSION)?;
    put_len(&mut w, ds.num_classes())?;
    put_len(&mut w, ds.images_per_class)?;
    put_len(&mut w, ds.image_size)?;
    put_u32(&mut w, 1)?;
    put_u64(&mut w, ds.seed)?;
    let plane = ds.image_size * ds.image_size;
    for (i, &y) in ds.labels.iter().enumerate() {
        put_len(&mut w, y)?;
        for &v in &ds.images.data()[i * plane..(i + 1) * plane] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let sidecar = CodesSidecar {
        version: FRACTAL_VERSION,
        seed: ds.seed,
        image_size: ds.image_size,
        images_per_class: ds.images_per_class,
        classes: ds.classes.clone(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), &sidecar)?;
    Ok(())
}

pub fn load_fractal_dataset(path: impl AsRef<Path>) -> Result<FractalDataset> {
    let path = path.as_ref();
    let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, FRACTAL_MAGIC)?;
    expect_version(&mut r, FRACTAL_VERSION)?;
    let num_classes = get_u32(&mut r)? as usize;
    let per_class = get_u32(&mut r)? as usize;
    let size = get_u32(&mut r)? as usize;
    let channels = get_u32(&mut r)?;
    let seed = get_u64(&mut r)?;
    if channels != 1 {
        return Err(Error::Schema(format!("expected 1 channel, got {channels}")));
    }
    let n = num_classes.checked_mul(per_class).filter(|&n| n <= 1 << 24).ok_or_else(|| corrupt("image count".into()))?;
    let plane = size * size;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * plane);
    let mut buf = vec![0u8; plane * 4];
    for _ in 0..n {
        let y = get_u32(&mut r).map_err(|_| corrupt("truncated".into()))? as usize;
        if y >= num_classes {
            return Err(corrupt(format!("label {y} ≥ {num_classes}")));
        }
        labels.push(y);
        r.read_exact(&mut buf).map_err(|_| corrupt("truncated".into()))?;
        data.extend(buf.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))));
    }
    let sidecar: CodesSidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    if sidecar.version != FRACTAL_VERSION || sidecar.classes.len() != num_classes {
        return Err(Error::Schema("IFS sidecar does not match dataset header".into()));
    }
    let images = Tensor::from_vec(&[n, 1, size, size], data)?;
    Ok(FractalDataset { classes: sidecar.classes, images_per_class: per_class, image_size: size, seed, images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half(b: [f64; 2]) -> AffineMap {
        AffineMap { a: [[0.5, 0.0], [0.0, 0.5]], b }
    }

    #[test]
    fn single_map_code_is_valid() {
        let code = IfsCode::from_maps(vec![half([0.0, 0.0])], 1e-3).unwrap();
        assert_eq!(code.probs, vec![1.0]);
        code.validate().unwrap();
    }

    #[test]
    fn zero_map_is_degenerate() {
        let zero = AffineMap { a: [[0.0; 2]; 2], b: [0.1, 0.2] };
        assert!(matches!(IfsCode::from_maps(vec![half([0.0; 2]), zero], 1e-3), Err(Error::Sampling(_))));
    }

    #[test]
    fn singular_values_of_known_matrices() {
        let m = AffineMap { a: [[3.0, 0.0], [0.0, -2.0]], b: [0.0; 2] };
        let (hi, lo) = m.singular_values();
        assert!((hi - 3.0).abs() < 1e-12 && (lo - 2.0).abs() < 1e-12);
        let shear = AffineMap { a: [[1.0, 1.0], [0.0, 1.0]], b: [0.0; 2] };
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((shear.singular_values().0 - golden).abs() < 1e-12);
    }

    #[test]
    fn sampled_codes_respect_contraction_band() {
        let cfg = IfsSampling::default();
        let mut rng = rng::stream(3, "ifs", &[]);
        for i in 0..100 {
            let code = sample_ifs(2 + i % 7, &cfg, &mut rng).unwrap();
            code.validate().unwrap();
            // independent oracle: σ_max from the eigenvalues of AᵀA
            let mean: f64 = code
                .maps
                .iter()
                .zip(&code.probs)
                .map(|(m, p)| {
                    let [[a, b], [c, d]] = m.a;
                    let (p11, p12, p22) = (a * a + c * c, a * b + c * d, b * b + d * d);
                    let tr = p11 + p22;
                    let det = p11 * p22 - p12 * p12;
                    let top = (tr / 2.0 + ((tr / 2.0).powi(2) - det).max(0.0).sqrt()).sqrt();
                    assert!(top <= cfg.contraction_bound + 1e-12);
                    p * top
                })
                .sum();
            assert!((0.4..=0.8).contains(&mean), "{mean}");
        }
        assert!(sample_ifs(1, &cfg, &mut rng).is_err());
        assert!(sample_ifs(9, &cfg, &mut rng).is_err());
    }

    #[test]
    fn fixed_point_renders_single_cell() {
        let code = IfsCode::from_maps(vec![half([0.5, 0.5])], 1e-3).unwrap();
        let img = render_fractal(&code, &RenderConfig { size: 16, iterations: 2000, burn_in: 100 }, &mut rng::stream(0, "r", &[]))
            .unwrap();
        assert_eq!(img.data().iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(img.data().iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn sierpinski_mass_lies_on_gasket() {
        // corners (0,0), (1,0), (0,1): at 2^k resolution, cell (row, col)
        // belongs to the gasket iff row & col == 0
        let code = IfsCode::from_maps(vec![half([0.0, 0.0]), half([0.5, 0.0]), half([0.0, 0.5])], 1e-3).unwrap();
        let cfg = RenderConfig { size: 32, iterations: 50_000, burn_in: 100 };
        let img = render_fractal(&code, &cfg, &mut rng::stream(1, "r", &[])).unwrap();
        let frac = nonzero_fraction(&img);
        assert!((0.05..=0.6).contains(&frac), "{frac}");
        // log-scaled intensity overweights faint cells, so this bound is
        // conservative; stray hits sit at shared cell corners
        let (mut on, mut total) = (0.0, 0.0);
        for row in 0..32 {
            for col in 0..32 {
                let v = img.data()[row * 32 + col];
                total += v;
                if row & col == 0 {
                    on += v;
                }
            }
        }
        assert!(on / total > 0.9, "{on}/{total}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let code = sample_ifs(3, &IfsSampling::default(), &mut rng::stream(5, "ifs", &[])).unwrap();
        let cfg = RenderConfig::default();
        let a = render_fractal(&code, &cfg, &mut rng::stream(9, "r", &[])).unwrap();
        let b = render_fractal(&code, &cfg, &mut rng::stream(9, "r", &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diverging_code_is_reported() {
        let code = IfsCode { maps: vec![AffineMap { a: [[2.0, 0.0], [0.0, 2.0]], b: [1.0, 1.0] }], probs: vec![1.0] };
        let r = render_fractal(&code, &RenderConfig::default(), &mut rng::stream(0, "r", &[]));
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn tiny_dataset_and_file_round_trip() {
        let cfg = FractalConfig { num_classes: 1, images_per_class: 1, seed: 4, ..Default::default() };
        let ds = build_pretrain_dataset(&cfg).unwrap();
        assert_eq!(ds.labels, vec![0]);
        assert_eq!(ds.images.shape(), &[1, 1, 32, 32]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fractals.bin");
        save_fractal_dataset(&path, &ds).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(load_fractal_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn same_class_images_correlate() {
        let cfg = FractalConfig { num_classes: 6, images_per_class: 4, seed: 8, ..Default::default() };
        let ds = build_pretrain_dataset(&cfg).unwrap();
        let corr = |i: usize, j: usize| {
            let (a, b) = (ds.images.row(i), ds.images.row(j));
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for i in 0..ds.labels.len() {
            for j in i + 1..ds.labels.len() {
                if ds.labels[i] == ds.labels[j] {
                    assert_ne!(ds.images.row(i), ds.images.row(j));
                    within += corr(i, j);
                    nw += 1;
                } else {
                    across += corr(i, j);
                    na += 1;
                }
            }
        }
        assert!(within / nw as f64 > across / na as f64);
    }
}
