//! Dense 2-D convolution kernels shared by the forward-physics operators and
//! the autodiff tape.
//!
//! Convention: true convolution with a centered anchor,
//! `out[n,co,i,j] = sum_{ci,a,b} w[co,ci,a,b] * x[n,ci, i-(a-ca), j-(b-cb)]`
//! with `ca = (kh-1)/2`, `cb = (kw-1)/2`. `transpose` and `kernel_grad` are
//! the exact adjoints with respect to the input and the kernel, so the three
//! routines close under differentiation.
//!
//! Inner loops run over contiguous row segments (periodic shifts split each
//! row into at most two runs), which is what keeps CPU training viable.

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

/// Boundary handling for spatial convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    ZeroPad,
}

/// `acc[0..w] += wv * row_shifted_by(src, shift)` where
/// `src_index = (j + shift) mod w`, split into two contiguous runs.
#[inline]
fn axpy_rotated(acc: &mut [f64], src: &[f64], wv: f64, shift: usize) {
    let w = acc.len();
    let head = w - shift;
    for (a, s) in acc[..head].iter_mut().zip(&src[shift..]) {
        *a += wv * s;
    }
    for (a, s) in acc[head..].iter_mut().zip(&src[..shift]) {
        *a += wv * s;
    }
}

/// Zero-boundary variant: `acc[j] += wv * src[j - dj]` for in-range `j - dj`.
#[inline]
fn axpy_shifted_zero(acc: &mut [f64], src: &[f64], wv: f64, dj: isize) {
    let w = acc.len() as isize;
    let j0 = dj.max(0);
    let j1 = (w + dj).min(w);
    if j0 >= j1 {
        return;
    }
    let (j0, j1) = (j0 as usize, j1 as usize);
    let s0 = (j0 as isize - dj) as usize;
    for (a, s) in acc[j0..j1].iter_mut().zip(&src[s0..s0 + (j1 - j0)]) {
        *a += wv * s;
    }
}

/// Dot of `g[0..w]` with the rotated source row.
#[inline]
fn dot_rotated(g: &[f64], src: &[f64], shift: usize) -> f64 {
    let w = g.len();
    let head = w - shift;
    let mut acc = 0.0;
    for (a, s) in g[..head].iter().zip(&src[shift..]) {
        acc += a * s;
    }
    for (a, s) in g[head..].iter().zip(&src[..shift]) {
        acc += a * s;
    }
    acc
}

#[inline]
fn dot_shifted_zero(g: &[f64], src: &[f64], dj: isize) -> f64 {
    let w = g.len() as isize;
    let j0 = dj.max(0);
    let j1 = (w + dj).min(w);
    if j0 >= j1 {
        return 0.0;
    }
    let (j0, j1) = (j0 as usize, j1 as usize);
    let s0 = (j0 as isize - dj) as usize;
    let mut acc = 0.0;
    for (a, s) in g[j0..j1].iter().zip(&src[s0..s0 + (j1 - j0)]) {
        acc += a * s;
    }
    acc
}

/// `x: [n, ci, h, w]`, `weight: [co, ci, kh, kw]` -> `[n, co, h, w]`.
pub fn conv2d(x: ArrayView4<f64>, weight: ArrayView4<f64>, boundary: Boundary) -> Array4<f64> {
    let (n, ci, h, w) = x.dim();
    let (co, wci, kh, kw) = weight.dim();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
    let ca = (kh as isize - 1) / 2;
    let cb = (kw as isize - 1) / 2;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ws = weight.as_standard_layout();
    let ws = ws.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, co, h, w));
    let os = out.as_slice_mut().expect("standard layout");
    let plane = h * w;
    for ni in 0..n {
        for o in 0..co {
            let out_plane = &mut os[(ni * co + o) * plane..(ni * co + o + 1) * plane];
            for c in 0..ci {
                let src_plane = &xs[(ni * ci + c) * plane..(ni * ci + c + 1) * plane];
                let wbase = ((o * ci) + c) * kh * kw;
                for a in 0..kh {
                    let di = a as isize - ca;
                    for b in 0..kw {
                        let wv = ws[wbase + a * kw + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let dj = b as isize - cb;
                        match boundary {
                            Boundary::Periodic => {
                                // src col = (j - dj) mod w = (j + shift) mod w
                                let shift = (-dj).rem_euclid(w as isize) as usize;
                                for i in 0..h {
                                    let si = (i as isize - di).rem_euclid(h as isize) as usize;
                                    axpy_rotated(
                                        &mut out_plane[i * w..(i + 1) * w],
                                        &src_plane[si * w..(si + 1) * w],
                                        wv,
                                        shift,
                                    );
                                }
                            }
                            Boundary::ZeroPad => {
                                for i in 0..h {
                                    let si = i as isize - di;
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    axpy_shifted_zero(
                                        &mut out_plane[i * w..(i + 1) * w],
                                        &src_plane[si as usize * w..(si as usize + 1) * w],
                                        wv,
                                        dj,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv2d` in its input: `g: [n, co, h, w]` -> `[n, ci, h, w]`.
pub fn conv_transpose2d(
    g: ArrayView4<f64>,
    weight: ArrayView4<f64>,
    boundary: Boundary,
) -> Array4<f64> {
    let (n, co, h, w) = g.dim();
    let (wco, ci, kh, kw) = weight.dim();
    assert_eq!(co, wco, "conv_transpose2d: grad has {co} channels, kernel has {wco}");
    let ca = (kh as isize - 1) / 2;
    let cb = (kw as isize - 1) / 2;
    let g = g.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let ws = weight.as_standard_layout();
    let ws = ws.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, ci, h, w));
    let os = out.as_slice_mut().expect("standard layout");
    let plane = h * w;
    // z[p, q] += wv * g[p + di, q + dj]: the shifts flip sign.
    for ni in 0..n {
        for c in 0..ci {
            let out_plane = &mut os[(ni * ci + c) * plane..(ni * ci + c + 1) * plane];
            for o in 0..co {
                let src_plane = &gs[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                let wbase = ((o * ci) + c) * kh * kw;
                for a in 0..kh {
                    let di = a as isize - ca;
                    for b in 0..kw {
                        let wv = ws[wbase + a * kw + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let dj = b as isize - cb;
                        match boundary {
                            Boundary::Periodic => {
                                let shift = dj.rem_euclid(w as isize) as usize;
                                for p in 0..h {
                                    let gi = (p as isize + di).rem_euclid(h as isize) as usize;
                                    axpy_rotated(
                                        &mut out_plane[p * w..(p + 1) * w],
                                        &src_plane[gi * w..(gi + 1) * w],
                                        wv,
                                        shift,
                                    );
                                }
                            }
                            Boundary::ZeroPad => {
                                for p in 0..h {
                                    let gi = p as isize + di;
                                    if gi < 0 || gi >= h as isize {
                                        continue;
                                    }
                                    axpy_shifted_zero(
                                        &mut out_plane[p * w..(p + 1) * w],
                                        &src_plane[gi as usize * w..(gi as usize + 1) * w],
                                        wv,
                                        -dj,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv2d` in its kernel:
/// `x: [n, ci, h, w]`, `g: [n, co, h, w]` -> `[co, ci, kh, kw]`.
pub fn conv_kernel_grad(
    x: ArrayView4<f64>,
    g: ArrayView4<f64>,
    kh: usize,
    kw: usize,
    boundary: Boundary,
) -> Array4<f64> {
    let (n, ci, h, w) = x.dim();
    let (gn, co, gh, gw) = g.dim();
    assert_eq!((n, h, w), (gn, gh, gw), "conv_kernel_grad: batch/spatial mismatch");
    let ca = (kh as isize - 1) / 2;
    let cb = (kw as isize - 1) / 2;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let g = g.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let mut out = Array4::zeros((co, ci, kh, kw));
    let plane = h * w;
    for o in 0..co {
        for c in 0..ci {
            for a in 0..kh {
                let di = a as isize - ca;
                for b in 0..kw {
                    let dj = b as isize - cb;
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let xp = &xs[(ni * ci + c) * plane..(ni * ci + c + 1) * plane];
                        let gp = &gs[(ni * co + o) * plane..(ni * co + o + 1) * plane];
                        match boundary {
                            Boundary::Periodic => {
                                let shift = (-dj).rem_euclid(w as isize) as usize;
                                for i in 0..h {
                                    let si = (i as isize - di).rem_euclid(h as isize) as usize;
                                    acc += dot_rotated(
                                        &gp[i * w..(i + 1) * w],
                                        &xp[si * w..(si + 1) * w],
                                        shift,
                                    );
                                }
                            }
                            Boundary::ZeroPad => {
                                for i in 0..h {
                                    let si = i as isize - di;
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    acc += dot_shifted_zero(
                                        &gp[i * w..(i + 1) * w],
                                        &xp[si as usize * w..(si as usize + 1) * w],
                                        dj,
                                    );
                                }
                            }
                        }
                    }
                    out[[o, c, a, b]] = acc;
                }
            }
        }
    }
    out
}
