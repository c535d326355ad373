//! Static PNG emission: loss curves, input/output/truth triptychs, and ring
//! correlation curves. Hand-rolled rasterization keeps the outputs easy to
//! assert on (known colors, known layout), with no interactive component.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayD;

use crate::data::{load_scene_set, normalize};
use crate::error::{Error, Result};
use crate::experiment::{final_frc, manifest_dir, RunManifest};
use crate::metrics::{FrcResult, FRC_THRESHOLD};
use crate::trainer::{load_checkpoint, LossRecord};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 420;
const MARGIN: u32 = 48;
pub const THRESHOLD_COLOR: Rgb<u8> = Rgb([204, 32, 32]);
pub const AXIS_COLOR: Rgb<u8> = Rgb([0, 0, 0]);
const SERIES_COLORS: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([128, 64, 160]),
];

struct Chart {
    img: RgbImage,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Chart {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        for x in MARGIN..WIDTH - MARGIN {
            img.put_pixel(x, HEIGHT - MARGIN, AXIS_COLOR);
        }
        for y in MARGIN..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, y, AXIS_COLOR);
        }
        let pad = |lo: f64, hi: f64| {
            if (hi - lo).abs() < 1e-300 {
                (lo - 1.0, hi + 1.0)
            } else {
                (lo, hi)
            }
        };
        let (x_min, x_max) = pad(x_range.0, x_range.1);
        let (y_min, y_max) = pad(y_range.0, y_range.1);
        Self {
            img,
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        let px = MARGIN as f64 + (x - self.x_min) / (self.x_max - self.x_min) * w;
        let py = (HEIGHT - MARGIN) as f64 - (y - self.y_min) / (self.y_max - self.y_min) * h;
        (px.round() as i64, py.round() as i64)
    }

    fn plot_point(&mut self, px: i64, py: i64, color: Rgb<u8>) {
        if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
            self.img.put_pixel(px as u32, py as u32, color);
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let (x0, y0) = self.to_px(a.0, a.1);
        let (x1, y1) = self.to_px(b.0, b.1);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let px = x0 + ((x1 - x0) as f64 * t).round() as i64;
            let py = y0 + ((y1 - y0) as f64 * t).round() as i64;
            self.plot_point(px, py, color);
        }
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: Rgb<u8>) {
        for pair in points.windows(2) {
            self.segment(pair[0], pair[1], color);
        }
    }

    fn hline(&mut self, y: f64, color: Rgb<u8>) {
        let (_, py) = self.to_px(self.x_min, y);
        for px in MARGIN..WIDTH - MARGIN {
            self.plot_point(px as i64, py, color);
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.img
            .save(path)
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Loss curves over steps: cycle, adversarial value, generator total, critic
/// total. The x axis is the (monotone) step index.
pub fn plot_loss_curves(records: &[LossRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no loss records to plot".into()));
    }
    let xs: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let series: [Vec<f64>; 4] = [
        records.iter().map(|r| r.cycle).collect(),
        records.iter().map(|r| r.disc).collect(),
        records.iter().map(|r| r.total_g).collect(),
        records.iter().map(|r| r.total_d).collect(),
    ];
    let (y_lo, y_hi) = finite_range(series.iter().flatten().copied());
    let mut chart = Chart::new((xs[0], *xs.last().unwrap()), (y_lo, y_hi));
    for (s, color) in series.iter().zip(SERIES_COLORS) {
        let pts: Vec<(f64, f64)> = xs.iter().copied().zip(s.iter().copied()).collect();
        chart.polyline(&pts, color);
    }
    chart.save(path)
}

/// Ring correlation curve with the 1/7 threshold line.
pub fn plot_frc(frc: &FrcResult, path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = frc
        .curve
        .iter()
        .map(|r| (r.frequency, r.value))
        .collect();
    if pts.is_empty() {
        return Err(Error::Config("empty ring correlation curve".into()));
    }
    let (x_lo, x_hi) = finite_range(pts.iter().map(|p| p.0));
    let mut chart = Chart::new((x_lo, x_hi), (-0.2, 1.05));
    chart.hline(FRC_THRESHOLD, THRESHOLD_COLOR);
    chart.polyline(&pts, SERIES_COLORS[0]);
    chart.save(path)
}

fn gray_panel(img: &ArrayD<f64>, lo: f64, hi: f64) -> Vec<Vec<u8>> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let span = (hi - lo).max(1e-300);
    let mut out = vec![vec![0u8; w]; h];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, px) in row.iter_mut().enumerate() {
            // Two-channel images render as the complex magnitude.
            let v = if s[0] >= 2 {
                (img[[0, i, j]].powi(2) + img[[1, i, j]].powi(2)).sqrt()
            } else {
                img[[0, i, j]]
            };
            *px = (((v - lo) / span).clamp(0.0, 1.0) * 255.0) as u8;
        }
    }
    out
}

/// Side-by-side input | reconstruction | truth grayscale panel.
pub fn triptych(
    input: &ArrayD<f64>,
    output: &ArrayD<f64>,
    truth: &ArrayD<f64>,
    path: &Path,
) -> Result<()> {
    let s = truth.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let (lo, hi) = finite_range(truth.iter().copied());
    let panels = [
        gray_panel(input, lo, hi),
        gray_panel(output, lo, hi),
        gray_panel(truth, lo, hi),
    ];
    let sep = 2usize;
    let total_w = 3 * w + 2 * sep;
    let mut img = RgbImage::from_pixel(total_w as u32, h as u32, Rgb([40, 40, 40]));
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (w + sep);
        for i in 0..h {
            for j in 0..w {
                let v = panel[i][j];
                img.put_pixel((x0 + j) as u32, i as u32, Rgb([v, v, v]));
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)
        .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

/// Renders every artifact a finished run supports: one loss-curve plot, one
/// triptych per checkpoint, and the final ring-correlation curve. Returns
/// the created files.
pub fn plot_run(manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let manifest: RunManifest = crate::io::read_sidecar(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let plots = base.join("plots");
    let mut created = Vec::new();

    let log_path = base.join(&manifest.loss_log);
    if !log_path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("manifest loss_log entry missing: {}", log_path.display()),
        )));
    }
    let text = std::fs::read_to_string(&log_path)?;
    let records: Vec<LossRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Serialization(e.to_string())))
        .collect::<Result<_>>()?;
    if !records.is_empty() {
        let p = plots.join("loss_curves.png");
        plot_loss_curves(&records, &p)?;
        created.push(p);
    }

    let test_dir = base.join(&manifest.dataset_test);
    if !test_dir.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "manifest dataset_test entry missing: {}",
                test_dir.display()
            ),
        )));
    }
    let (set, meta) = load_scene_set(&test_dir)?;
    for ckpt in &manifest.checkpoints {
        let dir = base.join(ckpt);
        if !dir.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("manifest checkpoint entry missing: {}", dir.display()),
            )));
        }
        let bundle = load_checkpoint(&dir)?;
        let meas = &set.measurements[0];
        let (norm_meas, rec) = normalize(meas, meta.normalization);
        let shape = norm_meas.shape().to_vec();
        let batch = norm_meas
            .clone()
            .into_shape_with_order(ndarray::IxDyn(&[1, shape[0], shape[1], shape[2]]))
            .expect("batch");
        let out = bundle.reconstruct(&batch)?;
        let recon = out
            .into_shape_with_order(ndarray::IxDyn(&[shape[0], shape[1], shape[2]]))
            .expect("unbatch")
            .mapv(|v| v * rec.scale + rec.offset);
        let name = ckpt.replace('/', "_");
        let p = plots.join(format!("triptych_{name}.png"));
        triptych(meas, &recon, &set.truths[0], &p)?;
        created.push(p);
    }

    if let Some(final_ckpt) = manifest.checkpoints.last() {
        let bundle = load_checkpoint(&base.join(final_ckpt))?;
        if let Some(frc) = final_frc(&bundle, &set, meta.normalization)? {
            let p = plots.join("frc.png");
            plot_frc(&frc, &p)?;
            created.push(p);
        }
    }
    Ok(created)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FrcRing;
    use ndarray::IxDyn;

    #[test]
    fn frc_plot_contains_threshold_line() {
        let curve: Vec<FrcRing> = (0..=16)
            .map(|r| FrcRing {
                radius: r,
                frequency: r as f64 / 32.0,
                value: 1.0 - r as f64 / 16.0,
                samples: 8 * r.max(1),
            })
            .collect();
        let frc = FrcResult {
            curve,
            resolution: 4.0,
            nyquist_limited: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frc.png");
        plot_frc(&frc, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let hits = img.pixels().filter(|p| **p == THRESHOLD_COLOR).count();
        assert!(hits > 100, "threshold line missing ({hits} px)");
    }

    #[test]
    fn loss_plot_nonempty_and_axes_drawn() {
        let records: Vec<LossRecord> = (1..=50)
            .map(|s| LossRecord {
                step: s,
                cycle: 1.0 / s as f64,
                disc: 0.1 * (s as f64).sin(),
                gp: 0.01,
                total_g: 1.0 / s as f64 + 0.1,
                total_d: -0.1,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.png");
        plot_loss_curves(&records, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width(), WIDTH);
        // Series may overdraw axis pixels; most of the y axis survives.
        let axis = img.pixels().filter(|p| **p == AXIS_COLOR).count();
        assert!(axis as u32 >= HEIGHT - 2 * MARGIN - 16, "{axis} axis px");
        let colored = img
            .pixels()
            .filter(|p| SERIES_COLORS.contains(p))
            .count();
        assert!(colored > 50, "series not drawn");
    }

    #[test]
    fn triptych_layout() {
        let a = ArrayD::from_elem(IxDyn(&[1, 8, 8]), 0.2);
        let b = ArrayD::from_elem(IxDyn(&[1, 8, 8]), 0.5);
        let c = ArrayD::from_elem(IxDyn(&[1, 8, 8]), 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        triptych(&a, &b, &c, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width(), 8 * 3 + 4);
        assert_eq!(img.height(), 8);
    }
}
