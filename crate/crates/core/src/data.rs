//! Synthetic desk-scale datasets: scene fabrication, noise models,
//! normalization, augmentation, patching, and unpaired pool delivery.
//!
//! Ground truth and measurements stay paired by index inside a `SceneSet`
//! (evaluation needs the pairing); the training pools derived from it are
//! shuffled with independent seeds and expose no pairing information.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::models::ForwardOperator;

/// Stable sub-seed derivation: one master seed fans out to labeled streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the master through splitmix64.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    // Keep within i64 range so seeds survive TOML sidecars.
    (z ^ (z >> 31)) & 0x7fff_ffff_ffff_ffff
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainTag {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationKind {
    /// Divide by the standard deviation of the per-pixel magnitude
    /// (two-channel images use the complex magnitude).
    StdMagnitude,
    /// Shift-scale into [0, 1] by the per-image range.
    UnitRange,
    None,
}

/// Per-image record sufficient to undo normalization exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormRecord {
    pub kind: NormalizationKind,
    pub offset: f64,
    pub scale: f64,
}

pub fn normalize(x: &ArrayD<f64>, kind: NormalizationKind) -> (ArrayD<f64>, NormRecord) {
    match kind {
        NormalizationKind::None => (
            x.clone(),
            NormRecord {
                kind,
                offset: 0.0,
                scale: 1.0,
            },
        ),
        NormalizationKind::UnitRange => {
            let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let min = x.iter().fold(f64::INFINITY, |m, &v| m.min(v));
            let scale = if max > min { max - min } else { 1.0 };
            let rec = NormRecord {
                kind,
                offset: min,
                scale,
            };
            (x.mapv(|v| (v - min) / scale), rec)
        }
        NormalizationKind::StdMagnitude => {
            let shape = x.shape();
            let mags: Vec<f64> = if shape[0] == 2 {
                let plane = shape[1..].iter().product::<usize>();
                let flat = x.as_slice().expect("standard layout");
                (0..plane)
                    .map(|i| (flat[i] * flat[i] + flat[plane + i] * flat[plane + i]).sqrt())
                    .collect()
            } else {
                x.iter().map(|v| v.abs()).collect()
            };
            let n = mags.len() as f64;
            let mean = mags.iter().sum::<f64>() / n;
            let var = mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
            let scale = if var.sqrt() > 1e-300 { var.sqrt() } else { 1.0 };
            let rec = NormRecord {
                kind,
                offset: 0.0,
                scale,
            };
            (x.mapv(|v| v / scale), rec)
        }
    }
}

pub fn denormalize(x: &ArrayD<f64>, rec: &NormRecord) -> ArrayD<f64> {
    x.mapv(|v| v * rec.scale + rec.offset)
}

/// Scene families for the three applications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Piecewise-smooth random ellipse phantoms.
    Phantom,
    /// Sparse random point sources of fixed amplitude.
    PointSources,
    /// Low-pass filtered noise textures.
    TexturedNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "model")]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
    /// Gaussian floor plus horizontal streak artifacts of random amplitude.
    MixedStreak {
        sigma: f64,
        streaks: usize,
        streak_amp: f64,
    },
}

/// What to synthesize: geometry, count, and the measurement noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub size: usize,
    pub count: usize,
    pub channels: usize,
    pub noise: NoiseModel,
    /// Point-source count per image (PointSources scenes).
    pub sources: usize,
    /// Point-source amplitude.
    pub amplitude: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::Phantom,
            size: 32,
            count: 64,
            channels: 1,
            noise: NoiseModel::Gaussian { sigma: 0.05 },
            sources: 12,
            amplitude: 1.0,
        }
    }
}

/// Paired scenes; the pairing is consumed only by evaluation.
#[derive(Debug, Clone)]
pub struct SceneSet {
    pub truths: Vec<ArrayD<f64>>,
    pub measurements: Vec<ArrayD<f64>>,
    /// Second independent measurement of each scene (ring-correlation use).
    pub measurements_b: Option<Vec<ArrayD<f64>>>,
    pub seed: u64,
}

fn scene_image(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let s = spec.size;
    let c = spec.channels;
    let mut img = ArrayD::zeros(IxDyn(&[c, s, s]));
    match spec.kind {
        SceneKind::Phantom => {
            let shapes = rng.gen_range(3..=6);
            for _ in 0..shapes {
                let cx = rng.gen_range(0.2..0.8) * s as f64;
                let cy = rng.gen_range(0.2..0.8) * s as f64;
                let ax = rng.gen_range(0.08..0.35) * s as f64;
                let ay = rng.gen_range(0.08..0.35) * s as f64;
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let intensity = rng.gen_range(0.2..1.0);
                let (sa, ca) = angle.sin_cos();
                for i in 0..s {
                    for j in 0..s {
                        let dx = j as f64 - cx;
                        let dy = i as f64 - cy;
                        let u = ca * dx + sa * dy;
                        let v = -sa * dx + ca * dy;
                        if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                            img[[0, i, j]] = intensity;
                        }
                    }
                }
            }
        }
        SceneKind::PointSources => {
            let mut cells: Vec<usize> = (0..s * s).collect();
            cells.shuffle(rng);
            for &cell in cells.iter().take(spec.sources) {
                img[[0, cell / s, cell % s]] = spec.amplitude;
            }
        }
        SceneKind::TexturedNoise => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let noise = ndarray::Array4::from_shape_fn((1, 1, s, s), |_| normal.sample(rng));
            let blur = crate::physics::LearnableConvKernel::gaussian(
                7,
                2.0,
                crate::conv::Boundary::Periodic,
            );
            let blurred = blur.apply(noise.view()).expect("blur");
            let max = blurred.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            for i in 0..s {
                for j in 0..s {
                    img[[0, i, j]] = 0.5 + 0.5 * blurred[[0, 0, i, j]] / max;
                }
            }
        }
    }
    img
}

fn add_noise(img: &mut ArrayD<f64>, noise: &NoiseModel, rng: &mut ChaCha8Rng) {
    match *noise {
        NoiseModel::Gaussian { sigma } => {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).unwrap();
                img.mapv_inplace(|v| v + normal.sample(rng));
            }
        }
        NoiseModel::MixedStreak {
            sigma,
            streaks,
            streak_amp,
        } => {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).unwrap();
                img.mapv_inplace(|v| v + normal.sample(rng));
            }
            let shape = img.shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            for _ in 0..streaks {
                let row = rng.gen_range(0..h);
                let amp = streak_amp * rng.gen_range(-1.0..1.0f64);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for ci in 0..c {
                    for j in 0..w {
                        let ripple =
                            1.0 + 0.3 * (phase + j as f64 * 0.37).sin();
                        img[[ci, row, j]] += amp * ripple;
                    }
                }
            }
        }
    }
}

/// Fabricates `count` scenes and their measurements
/// (`measurement = forward(truth) + noise`; `forward = None` keeps the scene).
pub fn generate(
    spec: &SceneSpec,
    forward: Option<&ForwardOperator>,
    seed: u64,
    frc_pair: bool,
) -> Result<SceneSet> {
    if spec.size == 0 || spec.count == 0 || spec.channels == 0 {
        return Err(Error::Config("scene spec has zero extent".into()));
    }
    if spec.kind == SceneKind::PointSources && spec.sources > spec.size * spec.size {
        return Err(Error::Config("more sources than pixels".into()));
    }
    let mut scene_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scenes"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise"));
    let mut noise_rng_b = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise-b"));
    let mut truths = Vec::with_capacity(spec.count);
    let mut measurements = Vec::with_capacity(spec.count);
    let mut measurements_b = if frc_pair {
        Some(Vec::with_capacity(spec.count))
    } else {
        None
    };
    for _ in 0..spec.count {
        let truth = scene_image(spec, &mut scene_rng);
        let clean = match forward {
            Some(op) => {
                let shape = truth.shape().to_vec();
                let batch = truth
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, shape[0], shape[1], shape[2]]))
                    .expect("batch reshape")
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("rank 4");
                let out = op.apply(batch.view())?;
                let (_, c, h, w) = out.dim();
                out.into_shape_with_order(IxDyn(&[c, h, w]))
                    .expect("unbatch")
            }
            None => truth.clone(),
        };
        let mut meas = clean.clone();
        add_noise(&mut meas, &spec.noise, &mut noise_rng);
        if let Some(ref mut mb) = measurements_b {
            let mut meas_b = clean;
            add_noise(&mut meas_b, &spec.noise, &mut noise_rng_b);
            mb.push(meas_b);
        }
        truths.push(truth);
        measurements.push(meas);
    }
    Ok(SceneSet {
        truths,
        measurements,
        measurements_b,
        seed,
    })
}

/// Normalized, independently shuffled pool of one domain's images.
#[derive(Debug, Clone)]
pub struct ImagePool {
    pub images: Vec<ArrayD<f64>>,
    pub records: Vec<NormRecord>,
    pub domain: DomainTag,
    pub seed: u64,
}

impl ImagePool {
    pub fn new(
        raw: &[ArrayD<f64>],
        domain: DomainTag,
        norm: NormalizationKind,
        seed: u64,
    ) -> Self {
        let mut images = Vec::with_capacity(raw.len());
        let mut records = Vec::with_capacity(raw.len());
        for img in raw {
            let (n, rec) = normalize(img, norm);
            images.push(n);
            records.push(rec);
        }
        // Destroy any index pairing right away.
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pool-shuffle"));
        order.shuffle(&mut rng);
        let images = order.iter().map(|&i| images[i].clone()).collect();
        let records = order.iter().map(|&i| records[i]).collect();
        Self {
            images,
            records,
            domain,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Infinite seeded batch iterator; each pass uses a fresh permutation.
    pub fn batches(&self, batch: usize, seed: u64) -> PoolIter<'_> {
        PoolIter {
            pool: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
            batch,
        }
    }
}

pub struct PoolIter<'a> {
    pool: &'a ImagePool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl PoolIter<'_> {
    /// Next `[batch, c, h, w]` stack.
    pub fn next_batch(&mut self) -> ArrayD<f64> {
        let shape = self.pool.images[0].shape().to_vec();
        let mut out = ArrayD::zeros(IxDyn(&[self.batch, shape[0], shape[1], shape[2]]));
        for b in 0..self.batch {
            if self.pos >= self.order.len() {
                self.order = (0..self.pool.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let idx = self.order[self.pos];
            self.pos += 1;
            out.index_axis_mut(Axis(0), b)
                .assign(&self.pool.images[idx]);
        }
        out
    }
}

/// Flip-based augmentation. With both flips each image contributes
/// `[identity, horizontal, vertical, both]`, quadrupling the pool.
pub fn augment(images: &[ArrayD<f64>], hflip: bool, vflip: bool) -> Vec<ArrayD<f64>> {
    let mut out = Vec::new();
    for img in images {
        out.push(img.clone());
        if hflip {
            out.push(flip(img, false, true));
        }
        if vflip {
            out.push(flip(img, true, false));
        }
        if hflip && vflip {
            out.push(flip(img, true, true));
        }
    }
    out
}

fn flip(img: &ArrayD<f64>, vertical: bool, horizontal: bool) -> ArrayD<f64> {
    let shape = img.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let si = if vertical { h - 1 - i } else { i };
                let sj = if horizontal { w - 1 - j } else { j };
                out[[ci, i, j]] = img[[ci, si, sj]];
            }
        }
    }
    out
}

/// Deterministic tiling with a reassembly map.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<ArrayD<f64>>,
    /// (image index, row offset, column offset) per patch.
    pub positions: Vec<(usize, usize, usize)>,
    pub image_shape: Vec<usize>,
    pub image_count: usize,
    pub patch: usize,
}

pub fn extract_patches(images: &[ArrayD<f64>], size: usize, stride: usize) -> Result<PatchSet> {
    if images.is_empty() {
        return Err(Error::Config("no images to patch".into()));
    }
    let shape = images[0].shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if size > h || size > w {
        return Err(Error::Config(format!(
            "patch {size} larger than image {h}x{w}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut patches = Vec::new();
    let mut positions = Vec::new();
    for (idx, img) in images.iter().enumerate() {
        let mut i = 0;
        while i + size <= h {
            let mut j = 0;
            while j + size <= w {
                let mut p = ArrayD::zeros(IxDyn(&[c, size, size]));
                for ci in 0..c {
                    for a in 0..size {
                        for b in 0..size {
                            p[[ci, a, b]] = img[[ci, i + a, j + b]];
                        }
                    }
                }
                patches.push(p);
                positions.push((idx, i, j));
                j += stride;
            }
            i += stride;
        }
    }
    Ok(PatchSet {
        patches,
        positions,
        image_shape: shape,
        image_count: images.len(),
        patch: size,
    })
}

/// Reassembles images from a patch set, averaging overlapping contributions.
pub fn stitch(set: &PatchSet) -> Vec<ArrayD<f64>> {
    let (c, h, w) = (
        set.image_shape[0],
        set.image_shape[1],
        set.image_shape[2],
    );
    let mut acc = vec![ArrayD::<f64>::zeros(IxDyn(&set.image_shape)); set.image_count];
    let mut cover = vec![ArrayD::<f64>::zeros(IxDyn(&[h, w])); set.image_count];
    for (p, &(idx, i, j)) in set.patches.iter().zip(&set.positions) {
        for ci in 0..c {
            for a in 0..set.patch {
                for b in 0..set.patch {
                    acc[idx][[ci, i + a, j + b]] += p[[ci, a, b]];
                }
            }
        }
        for a in 0..set.patch {
            for b in 0..set.patch {
                cover[idx][[i + a, j + b]] += 1.0;
            }
        }
    }
    for (img, cov) in acc.iter_mut().zip(&cover) {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if cov[[i, j]] > 0.0 {
                        img[[ci, i, j]] /= cov[[i, j]];
                    }
                }
            }
        }
    }
    acc
}

/// Nearest-neighbor 2x upsampling per axis (bilinear behind the flag).
pub fn upsample2(img: &ArrayD<f64>, bilinear: bool) -> ArrayD<f64> {
    let shape = img.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
    for ci in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                if bilinear {
                    let fi = (i as f64 - 0.5) / 2.0;
                    let fj = (j as f64 - 0.5) / 2.0;
                    let i0 = fi.floor().clamp(0.0, (h - 1) as f64) as usize;
                    let j0 = fj.floor().clamp(0.0, (w - 1) as f64) as usize;
                    let i1 = (i0 + 1).min(h - 1);
                    let j1 = (j0 + 1).min(w - 1);
                    let ti = (fi - i0 as f64).clamp(0.0, 1.0);
                    let tj = (fj - j0 as f64).clamp(0.0, 1.0);
                    out[[ci, i, j]] = (1.0 - ti) * (1.0 - tj) * img[[ci, i0, j0]]
                        + (1.0 - ti) * tj * img[[ci, i0, j1]]
                        + ti * (1.0 - tj) * img[[ci, i1, j0]]
                        + ti * tj * img[[ci, i1, j1]];
                } else {
                    out[[ci, i, j]] = img[[ci, i / 2, j / 2]];
                }
            }
        }
    }
    out
}

/// Dataset directory sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scene: SceneSpec,
    pub seed: u64,
    pub normalization: NormalizationKind,
    pub spec_hash: String,
    pub has_frc_pair: bool,
}

pub fn save_scene_set(dir: &Path, set: &SceneSet, meta: &DatasetMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, t) in set.truths.iter().enumerate() {
        io::write_tensor(&dir.join(format!("truth_{i:04}.otn")), t, io::Dtype::F64)?;
    }
    for (i, m) in set.measurements.iter().enumerate() {
        io::write_tensor(&dir.join(format!("meas_{i:04}.otn")), m, io::Dtype::F64)?;
    }
    if let Some(ref mb) = set.measurements_b {
        for (i, m) in mb.iter().enumerate() {
            io::write_tensor(&dir.join(format!("meas_b_{i:04}.otn")), m, io::Dtype::F64)?;
        }
    }
    io::write_sidecar(&dir.join("dataset.toml"), meta)
}

pub fn load_scene_set(dir: &Path) -> Result<(SceneSet, DatasetMeta)> {
    let meta: DatasetMeta = io::read_sidecar(&dir.join("dataset.toml"))?;
    let mut truths = Vec::with_capacity(meta.scene.count);
    let mut measurements = Vec::with_capacity(meta.scene.count);
    for i in 0..meta.scene.count {
        truths.push(io::read_tensor(&dir.join(format!("truth_{i:04}.otn")))?);
        measurements.push(io::read_tensor(&dir.join(format!("meas_{i:04}.otn")))?);
    }
    let measurements_b = if meta.has_frc_pair {
        let mut mb = Vec::with_capacity(meta.scene.count);
        for i in 0..meta.scene.count {
            mb.push(io::read_tensor(&dir.join(format!("meas_b_{i:04}.otn")))?);
        }
        Some(mb)
    } else {
        None
    };
    Ok((
        SceneSet {
            truths,
            measurements,
            measurements_b,
            seed: meta.seed,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::LearnableConvKernel;

    fn img(vals: &[f64], h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[1, h, w]), vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_noise_identity_forward_matches_truth() {
        let spec = SceneSpec {
            noise: NoiseModel::Gaussian { sigma: 0.0 },
            count: 5,
            ..Default::default()
        };
        let set = generate(&spec, None, 3, false).unwrap();
        for (t, m) in set.truths.iter().zip(&set.measurements) {
            assert_eq!(t, m);
        }
    }

    #[test]
    fn point_sources_sum_counts() {
        let spec = SceneSpec {
            kind: SceneKind::PointSources,
            sources: 9,
            amplitude: 1.5,
            noise: NoiseModel::Gaussian { sigma: 0.0 },
            count: 8,
            ..Default::default()
        };
        let set = generate(&spec, None, 11, false).unwrap();
        for t in &set.truths {
            assert!((t.sum() - 9.0 * 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = SceneSpec {
            count: 4,
            ..Default::default()
        };
        let a = generate(&spec, None, 9, false).unwrap();
        let b = generate(&spec, None, 9, false).unwrap();
        for (x, y) in a.truths.iter().zip(&b.truths) {
            assert_eq!(x, y);
        }
        for (x, y) in a.measurements.iter().zip(&b.measurements) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn forward_blur_enters_measurement() {
        let spec = SceneSpec {
            kind: SceneKind::PointSources,
            sources: 4,
            noise: NoiseModel::Gaussian { sigma: 0.0 },
            count: 2,
            ..Default::default()
        };
        let op = ForwardOperator::Kernel(LearnableConvKernel::gaussian(
            7,
            1.5,
            crate::conv::Boundary::Periodic,
        ));
        let set = generate(&spec, Some(&op), 5, false).unwrap();
        // Blur conserves mass but spreads it.
        for (t, m) in set.truths.iter().zip(&set.measurements) {
            assert!((t.sum() - m.sum()).abs() < 1e-9);
            assert!(m.iter().fold(0.0f64, |a, &v| a.max(v)) < t.iter().fold(0.0f64, |a, &v| a.max(v)));
        }
    }

    #[test]
    fn augment_quadruples_and_double_flip_is_identity() {
        let images: Vec<ArrayD<f64>> = (0..10)
            .map(|k| img(&[k as f64, 1.0, 2.0, 3.0], 2, 2))
            .collect();
        let out = augment(&images, true, true);
        assert_eq!(out.len(), 40);
        let one = img(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let hh = flip(&flip(&one, false, true), false, true);
        assert_eq!(hh, one);
        let vv = flip(&flip(&one, true, false), true, false);
        assert_eq!(vv, one);
    }

    #[test]
    fn augment_symmetric_image_identical_copies() {
        let sym = img(&[1.0, 1.0, 1.0, 1.0], 2, 2);
        let out = augment(&[sym.clone()], true, true);
        assert_eq!(out.len(), 4);
        for o in &out {
            assert_eq!(o, &sym);
        }
    }

    #[test]
    fn patches_cover_and_roundtrip() {
        let image = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |ix| (ix[1] * 8 + ix[2]) as f64);
        // Full-size patch: one per image.
        let full = extract_patches(&[image.clone()], 8, 8).unwrap();
        assert_eq!(full.patches.len(), 1);
        // 8x8 into 4 non-overlapping 4x4 tiles.
        let tiles = extract_patches(&[image.clone()], 4, 4).unwrap();
        assert_eq!(tiles.patches.len(), 4);
        let back = stitch(&tiles);
        assert_eq!(back[0], image);
        assert!(extract_patches(&[image], 16, 4).is_err());
    }

    #[test]
    fn patch_arithmetic_matches_expected_counts() {
        let image = ArrayD::zeros(IxDyn(&[1, 256, 256]));
        let set = extract_patches(&[image], 128, 128).unwrap();
        assert_eq!(set.patches.len(), 4);
    }

    #[test]
    fn normalization_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [
            NormalizationKind::StdMagnitude,
            NormalizationKind::UnitRange,
            NormalizationKind::None,
        ] {
            let x = ArrayD::from_shape_fn(IxDyn(&[2, 4, 4]), |_| rng.gen_range(-2.0..2.0));
            let (n, rec) = normalize(&x, kind);
            let back = denormalize(&n, &rec);
            let err = x
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-12, "{kind:?} roundtrip error {err}");
        }
    }

    #[test]
    fn augmentation_preserves_normalization_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |_| rng.gen_range(0.0..1.0));
        let (_, rec) = normalize(&x, NormalizationKind::UnitRange);
        for f in augment(&[x], true, true) {
            let (_, rf) = normalize(&f, NormalizationKind::UnitRange);
            assert!((rec.offset - rf.offset).abs() < 1e-15);
            assert!((rec.scale - rf.scale).abs() < 1e-15);
        }
    }

    #[test]
    fn pools_shuffle_independently_and_deterministically() {
        let spec = SceneSpec {
            count: 16,
            noise: NoiseModel::Gaussian { sigma: 0.0 },
            ..Default::default()
        };
        let set = generate(&spec, None, 21, false).unwrap();
        let px = ImagePool::new(&set.truths, DomainTag::X, NormalizationKind::None, 100);
        let py = ImagePool::new(
            &set.measurements,
            DomainTag::Y,
            NormalizationKind::None,
            200,
        );
        // Same data, different shuffles: some index must differ.
        assert!(px.images.iter().zip(&py.images).any(|(a, b)| a != b));
        let px2 = ImagePool::new(&set.truths, DomainTag::X, NormalizationKind::None, 100);
        for (a, b) in px.images.iter().zip(&px2.images) {
            assert_eq!(a, b);
        }
        // Batch iteration is deterministic per seed.
        let mut i1 = px.batches(4, 7);
        let mut i2 = px.batches(4, 7);
        assert_eq!(i1.next_batch(), i2.next_batch());
        let mut i3 = px.batches(4, 8);
        let _ = i3.next_batch();
    }

    #[test]
    fn upsample_doubles_extent() {
        let x = img(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let n = upsample2(&x, false);
        assert_eq!(n.shape(), &[1, 4, 4]);
        assert_eq!(n[[0, 0, 0]], 1.0);
        assert_eq!(n[[0, 1, 1]], 1.0);
        let b = upsample2(&x, true);
        assert_eq!(b.shape(), &[1, 4, 4]);
        // Bilinear center samples average the quad.
        assert!((b[[0, 1, 1]] - (1.0 * 0.75 * 0.75 + 2.0 * 0.75 * 0.25 + 3.0 * 0.25 * 0.75 + 4.0 * 0.25 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn scene_set_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            count: 3,
            ..Default::default()
        };
        let set = generate(&spec, None, 4, true).unwrap();
        let meta = DatasetMeta {
            scene: spec,
            seed: 4,
            normalization: NormalizationKind::UnitRange,
            spec_hash: "abc".into(),
            has_frc_pair: true,
        };
        save_scene_set(dir.path(), &set, &meta).unwrap();
        let (back, meta2) = load_scene_set(dir.path()).unwrap();
        assert_eq!(meta2.seed, 4);
        assert!(meta2.has_frc_pair);
        for (a, b) in set.truths.iter().zip(&back.truths) {
            assert_eq!(a, b);
        }
        for (a, b) in set
            .measurements_b
            .as_ref()
            .unwrap()
            .iter()
            .zip(back.measurements_b.as_ref().unwrap())
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
