//! Measurement operators: subsampled Fourier projection, learnable blur
//! kernels, and k-space line masks.
//!
//! Complex images are carried as two real channels (real, imaginary); all
//! inner products and norms act on that stacked representation. Operators are
//! deterministic; noise belongs to the data generator.

use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv_transpose2d, Boundary};
use crate::error::{Error, Result};

/// Fully known linear measurement operator.
#[derive(Debug, Clone)]
pub enum KnownLinearOperator {
    /// `F^-1 P_mask F` with an orthonormal 2-D DFT; acts on 2-channel
    /// (real, imaginary) image batches. The mask is stored centered (DC at
    /// `(h/2, w/2)`).
    FourierSubsample { mask: Array2<bool> },
    /// Dense matrix acting on each flattened image of the batch.
    ExplicitMatrix { matrix: Array2<f64> },
}

impl KnownLinearOperator {
    pub fn identity_matrix(n: usize) -> Self {
        Self::ExplicitMatrix {
            matrix: Array2::eye(n),
        }
    }

    pub fn apply(&self, x: ArrayView4<f64>) -> Result<Array4<f64>> {
        check_finite(x)?;
        match self {
            Self::FourierSubsample { mask } => fourier_subsample(x, mask),
            Self::ExplicitMatrix { matrix } => explicit_matrix_apply(x, matrix, false),
        }
    }

    /// `H^T y`. The Fourier projector is self-adjoint; the explicit matrix
    /// transposes.
    pub fn adjoint(&self, y: ArrayView4<f64>) -> Result<Array4<f64>> {
        check_finite(y)?;
        match self {
            Self::FourierSubsample { mask } => fourier_subsample(y, mask),
            Self::ExplicitMatrix { matrix } => explicit_matrix_apply(y, matrix, true),
        }
    }
}

fn check_finite(x: ArrayView4<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("input contains non-finite values".into()));
    }
    Ok(())
}

fn explicit_matrix_apply(
    x: ArrayView4<f64>,
    matrix: &Array2<f64>,
    transpose: bool,
) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    let len = c * h * w;
    if matrix.nrows() != len || matrix.ncols() != len {
        return Err(Error::Dimension(format!(
            "matrix is {}x{} but images flatten to {len}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        let img: Vec<f64> = x.index_axis(Axis(0), ni).iter().copied().collect();
        let mut dst = out.index_axis_mut(Axis(0), ni);
        let flat = dst.as_slice_mut().expect("standard layout");
        for r in 0..len {
            let mut acc = 0.0;
            for (k, &v) in img.iter().enumerate() {
                let m = if transpose {
                    matrix[[k, r]]
                } else {
                    matrix[[r, k]]
                };
                acc += m * v;
            }
            flat[r] = acc;
        }
    }
    Ok(out)
}

/// Orthonormal 2-D DFT of one complex plane, in place.
fn fft2(plane: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = plane.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in plane.rows_mut() {
        let buf = row.as_slice_mut().expect("contiguous row");
        row_fft.process(buf);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col_buf = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col_buf[i] = plane[[i, j]];
        }
        col_fft.process(&mut col_buf);
        for i in 0..h {
            plane[[i, j]] = col_buf[i];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    plane.mapv_inplace(|v| v * scale);
}

fn fourier_subsample(x: ArrayView4<f64>, mask: &Array2<bool>) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    if c != 2 {
        return Err(Error::Dimension(format!(
            "fourier_subsample expects 2 channels (real, imaginary), got {c}"
        )));
    }
    if mask.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "mask is {:?} but images are {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = Array4::zeros((n, 2, h, w));
    for ni in 0..n {
        let mut plane = Array2::from_shape_fn((h, w), |(i, j)| {
            Complex::new(x[[ni, 0, i, j]], x[[ni, 1, i, j]])
        });
        fft2(&mut plane, false);
        // Mask is centered; FFT index k corresponds to centered index
        // (k + n/2) mod n.
        for i in 0..h {
            let ci = (i + h / 2) % h;
            for j in 0..w {
                let cj = (j + w / 2) % w;
                if !mask[[ci, cj]] {
                    plane[[i, j]] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut plane, true);
        for i in 0..h {
            for j in 0..w {
                out[[ni, 0, i, j]] = plane[[i, j]].re;
                out[[ni, 1, i, j]] = plane[[i, j]].im;
            }
        }
    }
    Ok(out)
}

/// Learnable point-spread-function: one real `K x K` kernel convolved with
/// every channel.
#[derive(Debug, Clone)]
pub struct LearnableConvKernel {
    kernel: Array2<f64>,
    pub boundary: Boundary,
}

impl LearnableConvKernel {
    pub fn new(kernel: Array2<f64>, boundary: Boundary) -> Result<Self> {
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("kernel values must be finite".into()));
        }
        Ok(Self { kernel, boundary })
    }

    /// Unit impulse at the anchor pixel: the identity kernel.
    pub fn delta(size: usize, boundary: Boundary) -> Self {
        let mut kernel = Array2::zeros((size, size));
        kernel[[(size - 1) / 2, (size - 1) / 2]] = 1.0;
        Self { kernel, boundary }
    }

    /// Normalized Gaussian blur of standard deviation `sigma`, anchored at
    /// the kernel center.
    pub fn gaussian(size: usize, sigma: f64, boundary: Boundary) -> Self {
        let ca = (size as isize - 1) / 2;
        let mut kernel = Array2::zeros((size, size));
        for a in 0..size {
            for b in 0..size {
                let da = a as isize - ca;
                let db = b as isize - ca;
                kernel[[a, b]] =
                    (-((da * da + db * db) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let total = kernel.sum();
        kernel.mapv_inplace(|v| v / total);
        Self { kernel, boundary }
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn set_kernel(&mut self, kernel: Array2<f64>) -> Result<()> {
        if kernel.dim() != self.kernel.dim() {
            return Err(Error::Dimension(
                "kernel shape is fixed at construction".into(),
            ));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("kernel values must be finite".into()));
        }
        self.kernel = kernel;
        Ok(())
    }

    /// Weight tensor view `[1, 1, K, K]` for the conv routines.
    fn weight(&self) -> Array4<f64> {
        let (kh, kw) = self.kernel.dim();
        self.kernel
            .clone()
            .into_shape_with_order((1, 1, kh, kw))
            .expect("kernel reshape")
    }

    /// `h * x`, channel by channel.
    pub fn apply(&self, x: ArrayView4<f64>) -> Result<Array4<f64>> {
        check_finite(x)?;
        Ok(per_channel(x, |plane| {
            conv2d(plane, self.weight().view(), self.boundary)
        }))
    }

    /// Correlation with `h` (convolution with the flipped kernel).
    pub fn adjoint(&self, y: ArrayView4<f64>) -> Result<Array4<f64>> {
        check_finite(y)?;
        Ok(per_channel(y, |plane| {
            conv_transpose2d(plane, self.weight().view(), self.boundary)
        }))
    }
}

fn per_channel<F>(x: ArrayView4<f64>, f: F) -> Array4<f64>
where
    F: Fn(ArrayView4<f64>) -> Array4<f64>,
{
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .to_owned()
                .into_shape_with_order((1, 1, h, w))
                .expect("plane reshape");
            let res = f(plane.view());
            for i in 0..h {
                for j in 0..w {
                    out[[ni, ci, i, j]] = res[[0, 0, i, j]];
                }
            }
        }
    }
    out
}

/// 1-D k-space line sampling pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPattern {
    UniformRandomLines,
    Full,
}

/// Line-mask description: acceleration factor, fully sampled center
/// fraction, and the sampling pattern.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSpec {
    pub acceleration: usize,
    pub acs_fraction: f64,
    pub pattern: MaskPattern,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.acceleration < 1 {
            return Err(Error::Config("acceleration must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.acs_fraction) {
            return Err(Error::Config(format!(
                "acs_fraction {} outside [0, 1]",
                self.acs_fraction
            )));
        }
        Ok(())
    }
}

/// Generates a centered boolean mask sampling whole k-space lines (rows).
///
/// The ACS center block is always fully sampled and the total sampled line
/// count equals `round(lines / acceleration)`. Reproducible for a fixed seed.
pub fn make_mask(spec: &MaskSpec, shape: (usize, usize), seed: u64) -> Result<Array2<bool>> {
    spec.validate()?;
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::Config("mask shape must be nonzero".into()));
    }
    if spec.acceleration == 1 || spec.pattern == MaskPattern::Full {
        return Ok(Array2::from_elem((h, w), true));
    }
    let n_target = ((h as f64) / spec.acceleration as f64).round() as usize;
    let acs_count = ((h as f64) * spec.acs_fraction).round() as usize;
    let acs_start = (h - acs_count) / 2;
    let mut selected = vec![false; h];
    for line in selected.iter_mut().skip(acs_start).take(acs_count) {
        *line = true;
    }
    let mut remaining: Vec<usize> = (0..h)
        .filter(|i| *i < acs_start || *i >= acs_start + acs_count)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    remaining.shuffle(&mut rng);
    let extra = n_target.saturating_sub(acs_count);
    for &line in remaining.iter().take(extra) {
        selected[line] = true;
    }
    let mut mask = Array2::from_elem((h, w), false);
    for (i, &on) in selected.iter().enumerate() {
        if on {
            for j in 0..w {
                mask[[i, j]] = true;
            }
        }
    }
    Ok(mask)
}
