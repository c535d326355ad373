//! End-to-end experiment orchestration: generate, train, evaluate, verify.
//! Every run is named by its config hash and fully reproducible from
//! `(config, seed)`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{
    augment, generate, load_scene_set, normalize, save_scene_set, DatasetMeta, DomainTag,
    ImagePool, NormalizationKind, SceneSet,
};
use crate::error::{Error, Result};
use crate::metrics::{frc_resolution, psnr, ssim_auto, FrcResult, PsnrMode};
use crate::ot::{certify_prop1, AffineMap, BoundCertificate, DiscretePointSet};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train, CheckpointBundle, TrainState,
};

/// Aggregate of one metric across test images.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl MetricStats {
    pub fn from_values(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Self {
                mean: f64::INFINITY,
                median: f64::INFINITY,
                std: 0.0,
            };
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let std = (finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mut sorted = finite.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        Self { mean, median, std }
    }
}

/// Per-image metric row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr_paper: f64,
    pub psnr_conventional: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub baseline_psnr_paper: MetricStats,
    pub baseline_psnr_conventional: MetricStats,
    pub baseline_ssim: MetricStats,
    pub recon_psnr_paper: MetricStats,
    pub recon_psnr_conventional: MetricStats,
    pub recon_ssim: MetricStats,
    pub frc_resolution: Option<MetricStats>,
}

/// Everything a finished run leaves behind, written as `manifest.toml`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub wall_time_s: f64,
    /// Paths relative to the manifest's directory.
    pub dataset_train: String,
    pub dataset_test: String,
    pub loss_log: String,
    pub checkpoints: Vec<String>,
    pub metrics: MetricSummary,
    pub component_params: Vec<(String, usize)>,
}

fn to_batch1(img: &ArrayD<f64>) -> ArrayD<f64> {
    let s = img.shape().to_vec();
    img.clone()
        .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
        .expect("batch of one")
}

fn from_batch1(img: &ArrayD<f64>) -> ArrayD<f64> {
    let s = img.shape().to_vec();
    img.clone()
        .into_shape_with_order(IxDyn(&[s[1], s[2], s[3]]))
        .expect("unbatch")
}

/// Metrics of reconstruction (or raw input when `recon` is the measurement)
/// against the paired truth.
fn image_metrics(recon: &ArrayD<f64>, truth: &ArrayD<f64>) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr_paper: psnr(recon.view(), truth.view(), PsnrMode::Paper)?,
        psnr_conventional: psnr(recon.view(), truth.view(), PsnrMode::Conventional)?,
        ssim: ssim_auto(recon.view(), truth.view())?,
    })
}

fn stats_of(rows: &[ImageMetrics]) -> (MetricStats, MetricStats, MetricStats) {
    (
        MetricStats::from_values(&rows.iter().map(|r| r.psnr_paper).collect::<Vec<_>>()),
        MetricStats::from_values(
            &rows
                .iter()
                .map(|r| r.psnr_conventional)
                .collect::<Vec<_>>(),
        ),
        MetricStats::from_values(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>()),
    )
}

/// Reconstructs every test measurement with `reconstruct`, also computing
/// baseline (input vs truth) rows.
fn evaluate_set<F>(
    set: &SceneSet,
    normalization: NormalizationKind,
    mut reconstruct: F,
) -> Result<(Vec<ImageMetrics>, Vec<ImageMetrics>, Option<Vec<f64>>)>
where
    F: FnMut(&ArrayD<f64>) -> Result<ArrayD<f64>>,
{
    let mut baseline = Vec::with_capacity(set.truths.len());
    let mut recon_rows = Vec::with_capacity(set.truths.len());
    let mut frc_vals: Option<Vec<f64>> = set.measurements_b.as_ref().map(|_| Vec::new());
    for (i, (truth, meas)) in set.truths.iter().zip(&set.measurements).enumerate() {
        baseline.push(image_metrics(meas, truth)?);
        let (norm_meas, rec) = normalize(meas, normalization);
        let out = reconstruct(&to_batch1(&norm_meas))?;
        let recon = from_batch1(&out).mapv(|v| v * rec.scale + rec.offset);
        recon_rows.push(image_metrics(&recon, truth)?);
        if let (Some(mb), Some(vals)) = (set.measurements_b.as_ref(), frc_vals.as_mut()) {
            let (nb, rb) = normalize(&mb[i], normalization);
            let out_b = reconstruct(&to_batch1(&nb))?;
            let recon_b = from_batch1(&out_b).mapv(|v| v * rb.scale + rb.offset);
            let plane_a = first_plane(&recon);
            let plane_b = first_plane(&recon_b);
            let frc = frc_resolution(&plane_a, &plane_b, 1.0)?;
            vals.push(frc.resolution);
        }
    }
    Ok((baseline, recon_rows, frc_vals))
}

fn first_plane(img: &ArrayD<f64>) -> ndarray::Array2<f64> {
    let s = img.shape();
    ndarray::Array2::from_shape_fn((s[1], s[2]), |(i, j)| img[[0, i, j]])
}

/// Full pipeline: synthesize data, train, evaluate, record the manifest.
/// With zero epochs the manifest carries baseline metrics of the untrained
/// (identity-initialized) generator.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let variant = config.variant()?;
    let seeds = config.seeds();
    let hash = config.content_hash();
    let out_dir = out_root.join(format!("run-{}-s{}", &hash[..12], seeds.master));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("config.toml"),
        toml::to_string_pretty(config).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;

    // Data synthesis. The test split always carries the second measurement
    // draw so ring correlation is computable.
    let fwd = config.data_forward_operator(&seeds)?;
    let train_set = generate(
        &config.scene_spec(config.dataset.count),
        fwd.as_ref(),
        seeds.data,
        false,
    )?;
    let test_set = generate(
        &config.scene_spec(config.dataset.test_count),
        fwd.as_ref(),
        seeds.test_data,
        true,
    )?;
    let train_dir = out_dir.join("data/train");
    let test_dir = out_dir.join("data/test");
    let meta = |count: usize, seed: u64, frc: bool| DatasetMeta {
        scene: config.scene_spec(count),
        seed,
        normalization: config.dataset.normalization,
        spec_hash: hash.clone(),
        has_frc_pair: frc,
    };
    save_scene_set(
        &train_dir,
        &train_set,
        &meta(config.dataset.count, seeds.data, false),
    )?;
    save_scene_set(
        &test_dir,
        &test_set,
        &meta(config.dataset.test_count, seeds.test_data, true),
    )?;

    // Unpaired pools (independent shuffles; optional 4x flip augmentation).
    let (xs, ys) = if config.dataset.augment {
        (
            augment(&train_set.truths, true, true),
            augment(&train_set.measurements, true, true),
        )
    } else {
        (train_set.truths.clone(), train_set.measurements.clone())
    };
    let x_pool = ImagePool::new(&xs, DomainTag::X, config.dataset.normalization, seeds.pool_x);
    let y_pool = ImagePool::new(&ys, DomainTag::Y, config.dataset.normalization, seeds.pool_y);

    let mut state = TrainState::new(
        variant,
        &config.model_config(),
        config.known_operator(&seeds)?,
        config.loss.lipschitz,
        config.loss.gamma,
        seeds.init,
        seeds.gp,
    )?;

    let ckpt_root = out_dir.join("checkpoints");
    let mut checkpoints: Vec<String> = Vec::new();
    let every = config.experiment.checkpoint_every_epochs;
    let log = if config.optimizer.epochs > 0 {
        let result = train(
            &mut state,
            &config.optimizer,
            &x_pool,
            &y_pool,
            seeds.training,
            |st, epoch| {
                if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < config.optimizer.epochs
                {
                    let name = format!("epoch_{:04}", epoch + 1);
                    save_checkpoint(&ckpt_root.join(&name), st, seeds.master, &hash)?;
                    checkpoints.push(format!("checkpoints/{name}"));
                }
                Ok(())
            },
        );
        match result {
            Ok(log) => log,
            Err(e) => {
                // Abort dump so the failure is inspectable.
                let _ = save_checkpoint(&ckpt_root.join("abort"), &state, seeds.master, &hash);
                return Err(e);
            }
        }
    } else {
        Vec::new()
    };
    save_checkpoint(&ckpt_root.join("final"), &state, seeds.master, &hash)?;
    checkpoints.push("checkpoints/final".into());

    let loss_log_rel = "loss_log.jsonl".to_string();
    let mut log_file = std::fs::File::create(out_dir.join(&loss_log_rel))?;
    for record in &log {
        let line =
            serde_json::to_string(record).map_err(|e| Error::Serialization(e.to_string()))?;
        writeln!(log_file, "{line}")?;
    }

    let (baseline, recon, frc_vals) =
        evaluate_set(&test_set, config.dataset.normalization, |y| {
            state.reconstruct(y)
        })?;
    let (bp, bc, bs) = stats_of(&baseline);
    let (rp, rc, rs) = stats_of(&recon);
    let metrics = MetricSummary {
        baseline_psnr_paper: bp,
        baseline_psnr_conventional: bc,
        baseline_ssim: bs,
        recon_psnr_paper: rp,
        recon_psnr_conventional: rc,
        recon_ssim: rs,
        frc_resolution: frc_vals.map(|v| MetricStats::from_values(&v)),
    };

    let manifest = RunManifest {
        config_hash: hash,
        variant: variant.letter().to_string(),
        seed: seeds.master,
        epochs: config.optimizer.epochs,
        wall_time_s: started.elapsed().as_secs_f64(),
        dataset_train: "data/train".into(),
        dataset_test: "data/test".into(),
        loss_log: loss_log_rel,
        checkpoints,
        metrics,
        component_params: state
            .components
            .iter()
            .map(|c| (c.name.clone(), c.params.param_count()))
            .collect(),
    };
    crate::io::write_sidecar(&out_dir.join("manifest.toml"), &manifest)?;
    Ok(manifest)
}

pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Psnr,
    Ssim,
    Frc,
}

impl MetricKind {
    pub fn parse_list(text: &str) -> Result<Vec<MetricKind>> {
        text.split(',')
            .map(|t| match t.trim() {
                "psnr" => Ok(MetricKind::Psnr),
                "ssim" => Ok(MetricKind::Ssim),
                "frc" => Ok(MetricKind::Frc),
                other => Err(Error::Config(format!("unknown metric '{other}'"))),
            })
            .collect()
    }
}

/// Structured evaluation report (also written as TOML + CSV).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    pub count: usize,
    pub summary: MetricSummary,
}

/// Evaluates a checkpointed generator against a persisted dataset, writing
/// `report.toml` and `per_image.csv` under `out_dir`.
pub fn evaluate_checkpoint(
    checkpoint_dir: &Path,
    dataset_dir: &Path,
    metrics: &[MetricKind],
    out_dir: &Path,
) -> Result<EvalReport> {
    let bundle: CheckpointBundle = load_checkpoint(checkpoint_dir)?;
    let (set, meta) = load_scene_set(dataset_dir)?;
    if metrics.contains(&MetricKind::Frc) && set.measurements_b.is_none() {
        return Err(Error::Config(
            "frc requested but the dataset has no second measurement pool".into(),
        ));
    }
    let want_frc = metrics.contains(&MetricKind::Frc);
    let eval_set = SceneSet {
        truths: set.truths.clone(),
        measurements: set.measurements.clone(),
        measurements_b: if want_frc {
            set.measurements_b.clone()
        } else {
            None
        },
        seed: set.seed,
    };
    let (baseline, recon, frc_vals) =
        evaluate_set(&eval_set, meta.normalization, |y| bundle.reconstruct(y))?;
    let (bp, bc, bs) = stats_of(&baseline);
    let (rp, rc, rs) = stats_of(&recon);
    let summary = MetricSummary {
        baseline_psnr_paper: bp,
        baseline_psnr_conventional: bc,
        baseline_ssim: bs,
        recon_psnr_paper: rp,
        recon_psnr_conventional: rc,
        recon_ssim: rs,
        frc_resolution: frc_vals.as_ref().map(|v| MetricStats::from_values(v)),
    };
    std::fs::create_dir_all(out_dir)?;
    let report = EvalReport {
        checkpoint: checkpoint_dir.display().to_string(),
        dataset: dataset_dir.display().to_string(),
        count: eval_set.truths.len(),
        summary,
    };
    crate::io::write_sidecar(&out_dir.join("report.toml"), &report)?;

    let mut csv = String::from(
        "index,psnr_paper,psnr_conventional,ssim,baseline_psnr_paper,baseline_psnr_conventional,baseline_ssim,frc_resolution\n",
    );
    for (i, (r, b)) in recon.iter().zip(&baseline).enumerate() {
        let frc = frc_vals
            .as_ref()
            .and_then(|v| v.get(i))
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{frc}\n",
            r.psnr_paper,
            r.psnr_conventional,
            r.ssim,
            b.psnr_paper,
            b.psnr_conventional,
            b.ssim,
        ));
    }
    std::fs::write(out_dir.join("per_image.csv"), csv)?;
    Ok(report)
}

/// One line of the verification report.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyLine {
    pub instance: usize,
    pub atoms_mu: usize,
    pub atoms_nu: usize,
    pub dim: usize,
    #[serde(flatten)]
    pub certificate: BoundCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub instances: usize,
    pub failures: usize,
    pub all_ok: bool,
}

/// Certifies `instances` random discrete instances (random weighted atoms,
/// random affine maps both ways), streaming one JSON line each.
pub fn verify_ot(
    instances: usize,
    max_points: usize,
    dim: usize,
    seed: u64,
    sink: &mut dyn Write,
) -> Result<VerifySummary> {
    if max_points < 1 || max_points > 64 {
        return Err(Error::Config("max-points must be in 1..=64".into()));
    }
    if dim < 1 || dim > 8 {
        return Err(Error::Config("dim must be in 1..=8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    for instance in 0..instances {
        let d = rng.gen_range(1..=dim);
        let n = rng.gen_range(2..=max_points.max(2));
        let m = rng.gen_range(2..=max_points.max(2));
        let draw = |rng: &mut ChaCha8Rng, k: usize| -> Result<DiscretePointSet> {
            let pts = (0..k)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            let s: f64 = w.iter().sum();
            w[k - 1] += 1.0 - s;
            DiscretePointSet::new(pts, w)
        };
        let mu = draw(&mut rng, n)?;
        let nu = draw(&mut rng, m)?;
        let mk = |rng: &mut ChaCha8Rng| AffineMap {
            matrix: ndarray::Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0)),
            offset: (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        };
        let g = mk(&mut rng);
        let h = mk(&mut rng);
        let cert = certify_prop1(&mu, &nu, |y| g.apply(y), |x| h.apply(x))?;
        if !(cert.sandwich_ok && cert.gap_ok) {
            failures += 1;
        }
        let line = VerifyLine {
            instance,
            atoms_mu: n,
            atoms_nu: m,
            dim: d,
            certificate: cert,
        };
        writeln!(
            sink,
            "{}",
            serde_json::to_string(&line).map_err(|e| Error::Serialization(e.to_string()))?
        )?;
    }
    Ok(VerifySummary {
        instances,
        failures,
        all_ok: failures == 0,
    })
}

/// FRC of the final checkpoint's paired test reconstructions (plot support).
pub fn final_frc(
    bundle: &CheckpointBundle,
    set: &SceneSet,
    normalization: NormalizationKind,
) -> Result<Option<FrcResult>> {
    let Some(mb) = set.measurements_b.as_ref() else {
        return Ok(None);
    };
    let (na, ra) = normalize(&set.measurements[0], normalization);
    let (nb, rb) = normalize(&mb[0], normalization);
    let a = from_batch1(&bundle.reconstruct(&to_batch1(&na))?).mapv(|v| v * ra.scale + ra.offset);
    let b = from_batch1(&bundle.reconstruct(&to_batch1(&nb))?).mapv(|v| v * rb.scale + rb.offset);
    Ok(Some(frc_resolution(
        &first_plane(&a),
        &first_plane(&b),
        1.0,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_stats_median() {
        let s = MetricStats::from_values(&[3.0, 1.0, 2.0]);
        assert_eq!(s.median, 2.0);
        let s = MetricStats::from_values(&[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.median, 2.5);
        let s = MetricStats::from_values(&[f64::INFINITY, 1.0, 3.0]);
        assert_eq!(s.median, 2.0);
    }

    #[test]
    fn metric_kind_parsing() {
        assert_eq!(
            MetricKind::parse_list("psnr,ssim,frc").unwrap(),
            vec![MetricKind::Psnr, MetricKind::Ssim, MetricKind::Frc]
        );
        assert!(MetricKind::parse_list("psnr,bogus").is_err());
    }

    #[test]
    fn verify_ot_random_instances_certify() {
        let mut out = Vec::new();
        let summary = verify_ot(20, 6, 3, 99, &mut out).unwrap();
        assert!(summary.all_ok, "{} failures", summary.failures);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 20);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["sandwich_ok"].as_bool().unwrap());
            assert!(v["gap_ok"].as_bool().unwrap());
        }
    }

    #[test]
    fn verify_ot_validates_flags() {
        let mut out = Vec::new();
        assert!(verify_ot(1, 100, 3, 0, &mut out).is_err());
        assert!(verify_ot(1, 8, 9, 0, &mut out).is_err());
    }
}
