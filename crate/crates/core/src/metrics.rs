//! Reconstruction quality metrics: PSNR, global-statistics SSIM, and Fourier
//! ring correlation resolution.
//!
//! PSNR's primary form is `20 log10(n ||x*||_inf / ||x - x*||_2)` with `n`
//! the pixel count, kept verbatim including the unusual `n` factor; the
//! conventional peak/RMSE form is available as a second mode and both are
//! logged. dB *differences* between reconstructions of the same reference
//! agree across the two modes.

use ndarray::{Array2, ArrayViewD};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsnrMode {
    /// `20 log10(n ||x*||_inf / ||x - x*||_2)`.
    Paper,
    /// `20 log10(||x*||_inf / rmse)`.
    Conventional,
}

/// Peak signal-to-noise ratio in dB; `+inf` when the images coincide.
pub fn psnr(x: ArrayViewD<f64>, x_star: ArrayViewD<f64>, mode: PsnrMode) -> Result<f64> {
    if x.shape() != x_star.shape() {
        return Err(Error::Dimension(format!(
            "psnr shapes differ: {:?} vs {:?}",
            x.shape(),
            x_star.shape()
        )));
    }
    let peak = x_star.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Domain("psnr reference is identically zero".into()));
    }
    let err: f64 = x
        .iter()
        .zip(x_star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let n = x.len() as f64;
    let value = match mode {
        PsnrMode::Paper => 20.0 * (n * peak / err).log10(),
        PsnrMode::Conventional => 20.0 * (peak * n.sqrt() / err).log10(),
    };
    Ok(value)
}

/// Global-statistics structural similarity with explicit stabilizers.
pub fn ssim(x: ArrayViewD<f64>, x_star: ArrayViewD<f64>, c1: f64, c2: f64) -> Result<f64> {
    if x.shape() != x_star.shape() {
        return Err(Error::Dimension(format!(
            "ssim shapes differ: {:?} vs {:?}",
            x.shape(),
            x_star.shape()
        )));
    }
    let n = x.len() as f64;
    let mean_x: f64 = x.iter().sum::<f64>() / n;
    let mean_y: f64 = x_star.iter().sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(x_star.iter()) {
        let da = a - mean_x;
        let db = b - mean_y;
        var_x += da * da;
        var_y += db * db;
        cov += da * db;
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    Ok(((2.0 * mean_x * mean_y + c1) * (2.0 * cov + c2))
        / ((mean_x * mean_x + mean_y * mean_y + c1) * (var_x + var_y + c2)))
}

/// SSIM with stabilizers `(0.01 L)^2, (0.03 L)^2` derived from the reference
/// dynamic range (`L = 1` for a constant reference).
pub fn ssim_auto(x: ArrayViewD<f64>, x_star: ArrayViewD<f64>) -> Result<f64> {
    let max = x_star.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min = x_star.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let l = if max > min { max - min } else { 1.0 };
    ssim(x, x_star, (0.01 * l) * (0.01 * l), (0.03 * l) * (0.03 * l))
}

/// One ring of the correlation curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrcRing {
    pub radius: usize,
    /// Spatial frequency (cycles per length unit).
    pub frequency: f64,
    pub value: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrcResult {
    pub curve: Vec<FrcRing>,
    /// Resolution in length units: inverse of the frequency where the curve
    /// first crosses 1/7 (linearly interpolated between rings).
    pub resolution: f64,
    /// True when the curve never fell below the threshold; the resolution is
    /// then the Nyquist-limited sentinel `2 * pixel_size`.
    pub nyquist_limited: bool,
}

pub const FRC_THRESHOLD: f64 = 1.0 / 7.0;

fn fft2_plane(x: &Array2<f64>) -> Array2<Complex<f64>> {
    let (h, w) = x.dim();
    let mut plane = Array2::from_shape_fn((h, w), |(i, j)| Complex::new(x[[i, j]], 0.0));
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for mut r in plane.rows_mut() {
        row.process(r.as_slice_mut().unwrap());
    }
    let col = planner.plan_fft_forward(h);
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            buf[i] = plane[[i, j]];
        }
        col.process(&mut buf);
        for i in 0..h {
            plane[[i, j]] = buf[i];
        }
    }
    plane
}

/// Fourier ring correlation between two independent reconstructions of the
/// same scene. Images must be square and equal-sized.
pub fn frc_resolution(x1: &Array2<f64>, x2: &Array2<f64>, pixel_size: f64) -> Result<FrcResult> {
    if x1.dim() != x2.dim() {
        return Err(Error::Dimension(format!(
            "frc shapes differ: {:?} vs {:?}",
            x1.dim(),
            x2.dim()
        )));
    }
    let (h, w) = x1.dim();
    if h != w {
        return Err(Error::Dimension(format!(
            "frc expects square images, got {h}x{w}"
        )));
    }
    if pixel_size <= 0.0 {
        return Err(Error::Config("pixel_size must be positive".into()));
    }
    let n = h;
    let f1 = fft2_plane(x1);
    let f2 = fft2_plane(x2);
    let r_max = n / 2;
    let mut cross = vec![0.0f64; r_max + 1];
    let mut p1 = vec![0.0f64; r_max + 1];
    let mut p2 = vec![0.0f64; r_max + 1];
    let mut counts = vec![0usize; r_max + 1];
    let signed = |k: usize| -> f64 {
        if k <= n / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    for i in 0..n {
        for j in 0..n {
            let fu = signed(i);
            let fv = signed(j);
            let r = (fu * fu + fv * fv).sqrt().round() as usize;
            if r > r_max {
                continue;
            }
            let a = f1[[i, j]];
            let b = f2[[i, j]];
            cross[r] += (a * b.conj()).re;
            p1[r] += a.norm_sqr();
            p2[r] += b.norm_sqr();
            counts[r] += 1;
        }
    }
    let mut curve = Vec::with_capacity(r_max + 1);
    for r in 0..=r_max {
        let denom = (p1[r] * p2[r]).sqrt();
        let value = if denom > 0.0 { cross[r] / denom } else { 0.0 };
        curve.push(FrcRing {
            radius: r,
            frequency: r as f64 / (n as f64 * pixel_size),
            value,
            samples: counts[r],
        });
    }
    // First crossing below the threshold, skipping the DC ring.
    let mut crossing = None;
    for r in 1..=r_max {
        if curve[r].value < FRC_THRESHOLD {
            let prev = &curve[r - 1];
            let here = &curve[r];
            let t = if (prev.value - here.value).abs() > 1e-300 {
                ((prev.value - FRC_THRESHOLD) / (prev.value - here.value)).clamp(0.0, 1.0)
            } else {
                1.0
            };
            crossing = Some(prev.frequency + t * (here.frequency - prev.frequency));
            break;
        }
    }
    match crossing {
        Some(freq) if freq > 0.0 => Ok(FrcResult {
            curve,
            resolution: 1.0 / freq,
            nyquist_limited: false,
        }),
        _ => Ok(FrcResult {
            curve,
            resolution: 2.0 * pixel_size,
            nyquist_limited: true,
        }),
    }
}
