//! Generator and discriminator networks plus 1-Lipschitz enforcement.
//!
//! Networks are described by a flat plan of steps; parameter initialization,
//! the tape forward pass, and the Lipschitz layer catalog all walk the same
//! plan, so the parameter layout is a single source of truth. Everything is
//! f64 and seed-deterministic.

use ndarray::{Array2, Array4, ArrayD, ArrayView4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv_transpose2d, Boundary};
use crate::error::{Error, Result};
use crate::physics::{KnownLinearOperator, LearnableConvKernel};
use crate::tape::{NodeId, Tape};

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// Ordered parameter collection of one network component.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        self.entries.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Inserts every tensor as a leaf on the tape, in order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }

    /// Inserts every tensor as a non-differentiable constant (frozen).
    pub fn constants(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in &self.entries {
            out.extend(e.value.iter().copied());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "checkpoint has {} values, component expects {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            let slice = &flat[at..at + n];
            e.value = ArrayD::from_shape_vec(e.value.raw_dim(), slice.to_vec())
                .expect("shape preserved");
            at += n;
        }
        Ok(())
    }
}

/// Normalization inside conv blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Instance,
    Batch,
    None,
}

/// Encoder-decoder generator description. `depth` is the number of pooling
/// stages; spatial shape is preserved for inputs divisible by `2^depth`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 32,
            norm: NormKind::Instance,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum PlanStep {
    Conv { cin: usize, cout: usize, k: usize },
    Norm { c: usize },
    Act { slope: f64 },
    SaveSkip,
    Pool,
    Upsample,
    ConcatSkip,
    HeadConv { cin: usize, cout: usize },
    ResidualAdd,
}

fn generator_plan(spec: &GeneratorSpec) -> Vec<PlanStep> {
    let cap = spec.base_channels * 8;
    let ch = |i: usize| (spec.base_channels << i).min(cap);
    let mut plan = Vec::new();
    let mut prev = spec.in_channels;
    let push_block = |plan: &mut Vec<PlanStep>, cin: usize, cout: usize, norm: NormKind| {
        plan.push(PlanStep::Conv { cin, cout, k: 3 });
        if norm != NormKind::None {
            plan.push(PlanStep::Norm { c: cout });
        }
        plan.push(PlanStep::Act { slope: 0.1 });
        plan.push(PlanStep::Conv {
            cin: cout,
            cout,
            k: 3,
        });
        if norm != NormKind::None {
            plan.push(PlanStep::Norm { c: cout });
        }
        plan.push(PlanStep::Act { slope: 0.1 });
    };
    for i in 0..spec.depth {
        push_block(&mut plan, prev, ch(i), spec.norm);
        plan.push(PlanStep::SaveSkip);
        plan.push(PlanStep::Pool);
        prev = ch(i);
    }
    push_block(&mut plan, prev, ch(spec.depth), spec.norm);
    prev = ch(spec.depth);
    for i in (0..spec.depth).rev() {
        plan.push(PlanStep::Upsample);
        plan.push(PlanStep::ConcatSkip);
        push_block(&mut plan, prev + ch(i), ch(i), spec.norm);
        prev = ch(i);
    }
    plan.push(PlanStep::HeadConv {
        cin: prev,
        cout: spec.out_channels,
    });
    if spec.in_channels == spec.out_channels {
        plan.push(PlanStep::ResidualAdd);
    }
    plan
}

fn gaussian4(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
    std: f64,
) -> ArrayD<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array4::from_shape_fn(shape, |_| normal.sample(rng)).into_dyn()
}

fn init_plan_params(plan: &[PlanStep], seed: u64, prefix: &str) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::default();
    let mut conv_idx = 0usize;
    let mut norm_idx = 0usize;
    for step in plan {
        match *step {
            PlanStep::Conv { cin, cout, k } => {
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                params.push(
                    format!("{prefix}.conv{conv_idx}.weight"),
                    gaussian4(&mut rng, (cout, cin, k, k), std),
                );
                params.push(
                    format!("{prefix}.conv{conv_idx}.bias"),
                    ArrayD::zeros(IxDyn(&[cout])),
                );
                conv_idx += 1;
            }
            PlanStep::HeadConv { cin, cout } => {
                // Small head keeps the initial map near the residual identity.
                let std = 0.01 * (2.0 / (cin * 9) as f64).sqrt();
                params.push(
                    format!("{prefix}.head.weight"),
                    gaussian4(&mut rng, (cout, cin, 3, 3), std),
                );
                params.push(format!("{prefix}.head.bias"), ArrayD::zeros(IxDyn(&[cout])));
            }
            PlanStep::Norm { c } => {
                params.push(
                    format!("{prefix}.norm{norm_idx}.gain"),
                    ArrayD::ones(IxDyn(&[c])),
                );
                params.push(
                    format!("{prefix}.norm{norm_idx}.bias"),
                    ArrayD::zeros(IxDyn(&[c])),
                );
                norm_idx += 1;
            }
            _ => {}
        }
    }
    params
}

/// Seed-deterministic generator parameters (fan-in scaled Gaussians).
pub fn init_generator(spec: &GeneratorSpec, seed: u64) -> ParamSet {
    init_plan_params(&generator_plan(spec), seed, "g")
}

const NORM_EPS: f64 = 1e-5;

fn norm_layer(
    tape: &mut Tape,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    kind: NormKind,
) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let (n, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    match kind {
        NormKind::Instance => {
            let s = tape.sum_hw(x);
            let mean = tape.mul_scalar(s, 1.0 / (h * w) as f64);
            let mean_b = tape.broadcast_hw(mean, &shape);
            let centered = tape.sub(x, mean_b);
            let sq = tape.mul(centered, centered);
            let sq_sum = tape.sum_hw(sq);
            let var = tape.mul_scalar(sq_sum, 1.0 / (h * w) as f64);
            let var_eps = tape.add_scalar(var, NORM_EPS);
            let std = tape.sqrt(var_eps);
            let rstd = tape.recip(std);
            let rstd_b = tape.broadcast_hw(rstd, &shape);
            let normd = tape.mul(centered, rstd_b);
            let g_b = tape.broadcast_bias(gain, &shape);
            let scaled = tape.mul(normd, g_b);
            let b_b = tape.broadcast_bias(bias, &shape);
            tape.add(scaled, b_b)
        }
        NormKind::Batch => {
            let count = (n * h * w) as f64;
            let s = tape.sum_to_bias(x);
            let mean = tape.mul_scalar(s, 1.0 / count);
            let mean_b = tape.broadcast_bias(mean, &shape);
            let centered = tape.sub(x, mean_b);
            let sq = tape.mul(centered, centered);
            let sq_sum = tape.sum_to_bias(sq);
            let var = tape.mul_scalar(sq_sum, 1.0 / count);
            let var_eps = tape.add_scalar(var, NORM_EPS);
            let std = tape.sqrt(var_eps);
            let rstd = tape.recip(std);
            let rstd_b = tape.broadcast_bias(rstd, &shape);
            let normd = tape.mul(centered, rstd_b);
            let g_b = tape.broadcast_bias(gain, &shape);
            let scaled = tape.mul(normd, g_b);
            let b_b = tape.broadcast_bias(bias, &shape);
            tape.add(scaled, b_b)
        }
        NormKind::None => x,
    }
}

fn conv_layer(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = tape.conv2d(x, w, Boundary::Periodic);
    let shape = tape.value(y).shape().to_vec();
    let bias = tape.broadcast_bias(b, &shape);
    tape.add(y, bias)
}

/// Runs the generator on tape node `x` using `param_ids` (layout from
/// `init_generator`). Input spatial dims must be divisible by `2^depth`.
pub fn generator_forward(
    tape: &mut Tape,
    spec: &GeneratorSpec,
    param_ids: &[NodeId],
    x: NodeId,
) -> NodeId {
    let plan = generator_plan(spec);
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4, "generator input must be [n, c, h, w]");
    assert_eq!(shape[1], spec.in_channels, "generator input channels");
    let div = 1usize << spec.depth;
    assert!(
        shape[2] % div == 0 && shape[3] % div == 0,
        "spatial dims must be divisible by 2^depth; pad and crop first"
    );
    let mut cursor = 0usize;
    let mut next = |tape: &Tape, n: usize| {
        let _ = tape;
        let ids = &param_ids[cursor..cursor + n];
        cursor += n;
        (ids[0], ids.get(1).copied())
    };
    let mut skips: Vec<NodeId> = Vec::new();
    let input = x;
    let mut cur = x;
    for step in &plan {
        match *step {
            PlanStep::Conv { .. } | PlanStep::HeadConv { .. } => {
                let (w, b) = next(tape, 2);
                cur = conv_layer(tape, cur, w, b.unwrap());
            }
            PlanStep::Norm { .. } => {
                let (g, b) = next(tape, 2);
                cur = norm_layer(tape, cur, g, b.unwrap(), spec.norm);
            }
            PlanStep::Act { slope } => {
                cur = tape.leaky_relu(cur, slope);
            }
            PlanStep::SaveSkip => skips.push(cur),
            PlanStep::Pool => cur = tape.avg_pool2(cur),
            PlanStep::Upsample => cur = tape.upsample_nearest2(cur),
            PlanStep::ConcatSkip => {
                let skip = skips.pop().expect("skip stack");
                cur = tape.concat_channels(cur, skip);
            }
            PlanStep::ResidualAdd => cur = tape.add(cur, input),
        }
    }
    assert_eq!(cursor, param_ids.len(), "parameter count mismatch");
    cur
}

/// Total scalar parameter count of a generator.
pub fn generator_param_count(spec: &GeneratorSpec) -> usize {
    init_generator(spec, 0).param_count()
}

/// Plain (non-tape) forward pass, reflect-padding inputs whose spatial dims
/// are not divisible by `2^depth` and cropping back afterwards.
pub fn generator_apply(
    spec: &GeneratorSpec,
    params: &ParamSet,
    x: ArrayView4<f64>,
) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    if c != spec.in_channels {
        return Err(Error::Dimension(format!(
            "generator expects {} channels, got {c}",
            spec.in_channels
        )));
    }
    let div = 1usize << spec.depth;
    let hp = h.div_ceil(div) * div;
    let wp = w.div_ceil(div) * div;
    let padded = if hp == h && wp == w {
        x.to_owned()
    } else {
        let mut out = Array4::zeros((n, c, hp, wp));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..hp {
                    let si = reflect_index(i, h);
                    for j in 0..wp {
                        let sj = reflect_index(j, w);
                        out[[ni, ci, i, j]] = x[[ni, ci, si, sj]];
                    }
                }
            }
        }
        out
    };
    let mut tape = Tape::new();
    let ids = params.constants(&mut tape);
    let xi = tape.constant(padded.into_dyn());
    let y = generator_forward(&mut tape, spec, &ids, xi);
    let yv = tape
        .value(y)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank 4");
    let (_, co, _, _) = yv.dim();
    let mut out = Array4::zeros((n, co, h, w));
    for ni in 0..n {
        for ci in 0..co {
            for i in 0..h {
                for j in 0..w {
                    out[[ni, ci, i, j]] = yv[[ni, ci, i, j]];
                }
            }
        }
    }
    Ok(out)
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // reflect without repeating the edge sample
        let over = i - n + 1;
        n.saturating_sub(1 + over.min(n - 1))
    }
}

/// Discriminator topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscStyle {
    Patch,
    GlobalScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscHead {
    Linear,
    Sigmoid,
}

/// Critic description. Patch style emits a spatial map whose per-sample mean
/// is the potential value; global style reduces to one scalar per sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub style: DiscStyle,
    pub blocks: usize,
    pub head: DiscHead,
    pub base_channels: usize,
    pub norm: NormKind,
    pub in_channels: usize,
    pub input_hw: (usize, usize),
}

impl DiscriminatorSpec {
    fn block_channels(&self) -> Vec<(usize, usize)> {
        let cap = self.base_channels * 8;
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        let mut ch = self.base_channels;
        for _ in 0..self.blocks {
            out.push((prev, ch));
            prev = ch;
            ch = (ch * 2).min(cap);
        }
        out
    }

    fn final_channels(&self) -> usize {
        self.block_channels().last().map(|&(_, c)| c).unwrap_or(self.in_channels)
    }

    fn final_hw(&self) -> (usize, usize) {
        (
            self.input_hw.0 >> self.blocks,
            self.input_hw.1 >> self.blocks,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h >> self.blocks == 0 || w >> self.blocks == 0 {
            return Err(Error::Config(format!(
                "{} discriminator blocks exhaust a {h}x{w} input",
                self.blocks
            )));
        }
        Ok(())
    }
}

/// Seed-deterministic discriminator parameters.
pub fn init_discriminator(spec: &DiscriminatorSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::default();
    for (i, (cin, cout)) in spec.block_channels().into_iter().enumerate() {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        params.push(
            format!("d.conv{i}.weight"),
            gaussian4(&mut rng, (cout, cin, 3, 3), std),
        );
        params.push(format!("d.conv{i}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        if spec.norm != NormKind::None {
            params.push(format!("d.norm{i}.gain"), ArrayD::ones(IxDyn(&[cout])));
            params.push(format!("d.norm{i}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        }
    }
    match spec.style {
        DiscStyle::Patch => {
            let cin = spec.final_channels();
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.push(
                "d.map.weight",
                gaussian4(&mut rng, (1, cin, 3, 3), std),
            );
            params.push("d.map.bias", ArrayD::zeros(IxDyn(&[1])));
        }
        DiscStyle::GlobalScalar => {
            let fin = if spec.blocks == 0 {
                let (h, w) = spec.input_hw;
                spec.in_channels * h * w
            } else {
                spec.final_channels()
            };
            let normal = Normal::new(0.0, (1.0 / fin as f64).sqrt()).unwrap();
            params.push(
                "d.fc.weight",
                Array2::from_shape_fn((fin, 1), |_| normal.sample(&mut rng)).into_dyn(),
            );
            params.push("d.fc.bias", ArrayD::zeros(IxDyn(&[1])));
        }
    }
    params
}

/// Raw critic output: `[n, 1, ph, pw]` patch map or `[n]` scores.
pub fn discriminator_forward(
    tape: &mut Tape,
    spec: &DiscriminatorSpec,
    param_ids: &[NodeId],
    x: NodeId,
) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4, "discriminator input must be [n, c, h, w]");
    assert_eq!(shape[1], spec.in_channels, "discriminator input channels");
    assert_eq!(
        (shape[2], shape[3]),
        spec.input_hw,
        "discriminator input spatial dims"
    );
    let mut cursor = 0usize;
    let mut next2 = |ids: &[NodeId]| {
        let pair = (ids[cursor], ids[cursor + 1]);
        cursor += 2;
        pair
    };
    let mut cur = x;
    for _ in 0..spec.blocks {
        let (w, b) = next2(param_ids);
        cur = conv_layer(tape, cur, w, b);
        if spec.norm != NormKind::None {
            let (g, bb) = next2(param_ids);
            cur = norm_layer(tape, cur, g, bb, spec.norm);
        }
        cur = tape.leaky_relu(cur, 0.2);
        cur = tape.avg_pool2(cur);
    }
    let out = match spec.style {
        DiscStyle::Patch => {
            let (w, b) = next2(param_ids);
            conv_layer(tape, cur, w, b)
        }
        DiscStyle::GlobalScalar => {
            let n = tape.value(cur).shape()[0];
            let feat = if spec.blocks == 0 {
                let len = tape.value(cur).len() / n;
                tape.reshape(cur, &[n, len])
            } else {
                let (fh, fw) = spec.final_hw();
                let s = tape.sum_hw(cur);
                tape.mul_scalar(s, 1.0 / (fh * fw) as f64)
            };
            let (w, b) = next2(param_ids);
            let y = tape.matmul(feat, w);
            let rows = tape.value(y).shape()[0];
            let bb = tape.broadcast_rows(b, rows);
            let y = tape.add(y, bb);
            tape.reshape(y, &[n])
        }
    };
    assert_eq!(cursor, param_ids.len(), "discriminator parameter mismatch");
    out
}

/// Per-sample potential values `[n]`: patch maps are averaged, then the head
/// (linear or sigmoid) is applied.
pub fn discriminator_potential(
    tape: &mut Tape,
    spec: &DiscriminatorSpec,
    param_ids: &[NodeId],
    x: NodeId,
) -> NodeId {
    let raw = discriminator_forward(tape, spec, param_ids, x);
    let scores = if tape.value(raw).ndim() == 4 {
        let per = tape.sum_per_sample(raw);
        let count = tape.value(raw).len() / tape.value(raw).shape()[0];
        tape.mul_scalar(per, 1.0 / count as f64)
    } else {
        raw
    };
    match spec.head {
        DiscHead::Linear => scores,
        DiscHead::Sigmoid => tape.sigmoid(scores),
    }
}

/// Image-to-image network estimating an unknown measurement operator.
#[derive(Debug, Clone)]
pub struct NeuralOperator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
}

impl NeuralOperator {
    pub fn init(spec: GeneratorSpec, seed: u64) -> Self {
        let params = init_generator(&spec, seed);
        Self { spec, params }
    }

    pub fn apply(&self, x: ArrayView4<f64>) -> Result<Array4<f64>> {
        generator_apply(&self.spec, &self.params, x)
    }
}

/// Any measurement operator the trainer can plug into the forward path.
#[derive(Debug, Clone)]
pub enum ForwardOperator {
    Known(KnownLinearOperator),
    Kernel(LearnableConvKernel),
    Neural(NeuralOperator),
}

impl ForwardOperator {
    /// `H x` (or `h * x`, or the network map). Deterministic given parameters.
    pub fn apply(&self, x: ArrayView4<f64>) -> Result<Array4<f64>> {
        match self {
            Self::Known(op) => op.apply(x),
            Self::Kernel(k) => k.apply(x),
            Self::Neural(n) => n.apply(x),
        }
    }

    /// `H^T y` for the linear operators; the neural operator has none.
    pub fn adjoint(&self, y: ArrayView4<f64>) -> Result<Array4<f64>> {
        match self {
            Self::Known(op) => op.adjoint(y),
            Self::Kernel(k) => k.adjoint(y),
            Self::Neural(_) => Err(Error::UnsupportedOperator(
                "neural operators do not expose an adjoint".into(),
            )),
        }
    }
}

/// How the critic's 1-Lipschitz constraint is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum LipschitzMode {
    Clip { c: f64 },
    SpectralNorm { iters: usize },
    GradientPenalty { eta: f64 },
}

/// What a parameter tensor is, for operator-norm purposes.
#[derive(Debug, Clone, Copy)]
pub enum LayerOpKind {
    /// Convolution weight operating on `in_channels x spatial` inputs; the
    /// norm is that of the actual circulant/zero-pad operator.
    Conv {
        in_channels: usize,
        spatial: (usize, usize),
        boundary: Boundary,
    },
    /// Dense matrix `[in, out]`.
    Dense,
}

#[derive(Debug, Clone)]
pub struct LipschitzLayer {
    pub param_index: usize,
    pub kind: LayerOpKind,
}

/// Weight-bearing layers of a discriminator with the spatial sizes they
/// operate at, for spectral enforcement.
pub fn discriminator_layer_catalog(spec: &DiscriminatorSpec) -> Vec<LipschitzLayer> {
    let mut out = Vec::new();
    let mut idx = 0usize;
    let (mut h, mut w) = spec.input_hw;
    for (cin, _) in spec.block_channels() {
        out.push(LipschitzLayer {
            param_index: idx,
            kind: LayerOpKind::Conv {
                in_channels: cin,
                spatial: (h, w),
                boundary: Boundary::Periodic,
            },
        });
        idx += 2;
        if spec.norm != NormKind::None {
            idx += 2;
        }
        h /= 2;
        w /= 2;
    }
    match spec.style {
        DiscStyle::Patch => {
            out.push(LipschitzLayer {
                param_index: idx,
                kind: LayerOpKind::Conv {
                    in_channels: spec.final_channels(),
                    spatial: (h, w),
                    boundary: Boundary::Periodic,
                },
            });
        }
        DiscStyle::GlobalScalar => {
            out.push(LipschitzLayer {
                param_index: idx,
                kind: LayerOpKind::Dense,
            });
        }
    }
    out
}

/// Leading singular value of a dense matrix by power iteration.
pub fn power_iteration_dense(m: &Array2<f64>, iters: usize) -> f64 {
    let (rows, cols) = m.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..cols).map(|_| normal.sample(&mut rng)).collect();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let norm_v = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v.iter_mut().for_each(|x| *x /= norm_v);
        let mut u = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                u[r] += m[[r, c]] * v[c];
            }
        }
        sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut vt = vec![0.0; cols];
        for c in 0..cols {
            for r in 0..rows {
                vt[c] += m[[r, c]] * u[r];
            }
        }
        v = vt;
    }
    sigma
}

/// Operator norm of a conv layer acting on `[1, cin, h, w]` inputs, by power
/// iteration with the exact apply/adjoint pair.
pub fn power_iteration_conv(
    weight: ArrayView4<f64>,
    in_channels: usize,
    spatial: (usize, usize),
    boundary: Boundary,
    iters: usize,
) -> f64 {
    let (h, w) = spatial;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v = Array4::from_shape_fn((1, in_channels, h, w), |_| normal.sample(&mut rng));
    let mut sigma = 0.0;
    for _ in 0..iters {
        let norm_v = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v.mapv_inplace(|x| x / norm_v);
        let u = conv2d(v.view(), weight, boundary);
        sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = conv_transpose2d(u.view(), weight, boundary);
    }
    sigma
}

/// Applies the Lipschitz constraint in place. Clipping clamps every tensor;
/// spectral normalization rescales each cataloged weight by its operator
/// norm; the gradient penalty is a loss term, so enforcement is a no-op.
pub fn enforce_lipschitz(
    params: &mut ParamSet,
    catalog: &[LipschitzLayer],
    mode: &LipschitzMode,
) {
    match mode {
        LipschitzMode::GradientPenalty { .. } => {}
        LipschitzMode::Clip { c } => {
            let c = c.abs();
            for e in &mut params.entries {
                e.value.mapv_inplace(|x| x.clamp(-c, c));
            }
        }
        LipschitzMode::SpectralNorm { iters } => {
            for layer in catalog {
                let entry = &mut params.entries[layer.param_index];
                let sigma = match layer.kind {
                    LayerOpKind::Dense => {
                        let m = entry
                            .value
                            .view()
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("dense weight must be rank 2")
                            .to_owned();
                        power_iteration_dense(&m, *iters)
                    }
                    LayerOpKind::Conv {
                        in_channels,
                        spatial,
                        boundary,
                    } => {
                        let wv = entry
                            .value
                            .view()
                            .into_dimensionality::<ndarray::Ix4>()
                            .expect("conv weight must be rank 4");
                        power_iteration_conv(wv, in_channels, spatial, boundary, *iters)
                    }
                };
                if sigma > 1e-300 {
                    entry.value.mapv_inplace(|x| x / sigma);
                }
            }
        }
    }
}
