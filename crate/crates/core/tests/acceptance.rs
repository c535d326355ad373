//! Acceptance suite. Every test certifies one release criterion at its
//! stated tolerance and prints one `[PASS]` line with the measured margin.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::Instant;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use otcycle_core::config::ExperimentConfig;
use otcycle_core::conv::Boundary;
use otcycle_core::data::{generate, NoiseModel, SceneKind, SceneSpec};
use otcycle_core::experiment::{run_experiment, verify_ot};
use otcycle_core::losses::{
    cycle_loss, gradient_penalty, otdisc_loss, pls_cost, standard_cyclegan_losses, TapeMap,
    TapePotential, VariantId,
};
use otcycle_core::metrics::{psnr, ssim, PsnrMode};
use otcycle_core::ot::{
    certify_prop1, euclidean, wasserstein1, wasserstein1_dual, DiscretePointSet,
};
use otcycle_core::physics::{make_mask, KnownLinearOperator, LearnableConvKernel, MaskPattern, MaskSpec};
use otcycle_core::tape::{NodeId, Tape};
use otcycle_core::trainer::load_checkpoint;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn random_weighted_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DiscretePointSet {
    let pts = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let s: f64 = w.iter().sum();
    w[n - 1] += 1.0 - s;
    DiscretePointSet::new(pts, w).unwrap()
}

#[test]
fn criterion_01_prop1_certification() {
    let start = Instant::now();
    let mut sink = Vec::new();
    let summary = verify_ot(100, 8, 4, 2024, &mut sink).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        summary.all_ok,
        "[FAIL] sandwich/gap certification: {} of 100 instances violated",
        summary.failures
    );
    assert!(elapsed < 60.0, "[FAIL] certification took {elapsed:.1}s");
    println!(
        "[PASS] criterion 01: 100/100 random instances satisfy the transport sandwich and gap bounds at 1e-8 ({elapsed:.1}s)"
    );
}

#[test]
fn criterion_02_exact_inverse_zero_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    // Similarity maps (scaled orthogonal plus shift) in dimensions 2..=4.
    for trial in 0..20 {
        let d = 2 + trial % 3;
        let q = random_orthogonal(&mut rng, d);
        let c: f64 = rng.gen_range(0.5..2.5);
        let offset: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q2 = q.clone();
        let offset2 = offset.clone();
        let h = move |x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|r| c * (0..d).map(|k| q[[r, k]] * x[k]).sum::<f64>() + offset[r])
                .collect()
        };
        let g = move |y: &[f64]| -> Vec<f64> {
            let shifted: Vec<f64> = (0..d).map(|k| (y[k] - offset2[k]) / c).collect();
            (0..d)
                .map(|r| (0..d).map(|k| q2[[k, r]] * shifted[k]).sum::<f64>())
                .collect()
        };
        let mu = random_weighted_set(&mut rng, 2 + trial % 6, d);
        let nu = random_weighted_set(&mut rng, 2 + (trial + 3) % 6, d);
        let cert = certify_prop1(&mu, &nu, g, h).unwrap();
        assert!(
            cert.ell_cycle < 1e-10,
            "[FAIL] inverse pair leaked cycle residual {}",
            cert.ell_cycle
        );
        let gap = (cert.k - cert.d).abs();
        assert!(gap <= 1e-9, "[FAIL] zero-gap violated: {gap:.3e}");
        worst = worst.max(gap);
    }
    // Any invertible affine map in one dimension.
    for _ in 0..10 {
        let a: f64 = rng.gen_range(0.5..3.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let b: f64 = rng.gen_range(-1.0..1.0);
        let mu = random_weighted_set(&mut rng, 4, 1);
        let nu = random_weighted_set(&mut rng, 5, 1);
        let cert =
            certify_prop1(&mu, &nu, |y| vec![(y[0] - b) / a], |x| vec![a * x[0] + b]).unwrap();
        let gap = (cert.k - cert.d).abs();
        assert!(gap <= 1e-9, "[FAIL] 1-d zero-gap violated: {gap:.3e}");
        worst = worst.max(gap);
    }
    println!("[PASS] criterion 02: exact-inverse instances give |K - D| <= 1e-9 (worst {worst:.2e})");
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    // Gram-Schmidt on a random matrix.
    let mut q = Array2::zeros((d, d));
    for col in 0..d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
        for prev in 0..col {
            let dot: f64 = (0..d).map(|r| q[[r, prev]] * v[r]).sum();
            for r in 0..d {
                v[r] -= dot * q[[r, prev]];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for r in 0..d {
            q[[r, col]] = v[r] / norm;
        }
    }
    q
}

#[test]
fn criterion_03_strong_duality() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=4);
        let n = rng.gen_range(2..=6);
        let m = rng.gen_range(2..=6);
        let mu = random_weighted_set(&mut rng, n, d);
        let nu = random_weighted_set(&mut rng, m, d);
        let primal = wasserstein1(&mu, &nu, euclidean).unwrap();
        let dual = wasserstein1_dual(&mu, &nu, euclidean).unwrap();
        let gap = (primal - dual).abs();
        assert!(gap < 1e-8, "[FAIL] duality gap {gap:.3e}");
        worst = worst.max(gap);
    }
    println!("[PASS] criterion 03: primal = 1-Lipschitz dual on 100 random instances (worst gap {worst:.2e})");
}

fn dot4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm4(a: &Array4<f64>) -> f64 {
    dot4(a, a).sqrt()
}

#[test]
fn criterion_04_operator_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let spec = MaskSpec {
        acceleration: 3,
        acs_fraction: 0.1,
        pattern: MaskPattern::UniformRandomLines,
    };
    let fourier = KnownLinearOperator::FourierSubsample {
        mask: make_mask(&spec, (16, 16), 5).unwrap(),
    };
    let kernel_p = LearnableConvKernel::new(
        Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0)),
        Boundary::Periodic,
    )
    .unwrap();
    let kernel_z = LearnableConvKernel::new(
        Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0)),
        Boundary::ZeroPad,
    )
    .unwrap();

    let mut worst_adj: f64 = 0.0;
    for trial in 0..1000 {
        let x = Array4::from_shape_fn((1, 2, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let y = Array4::from_shape_fn((1, 2, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let (hx, hty) = match trial % 3 {
            0 => (
                fourier.apply(x.view()).unwrap(),
                fourier.adjoint(y.view()).unwrap(),
            ),
            1 => (
                kernel_p.apply(x.view()).unwrap(),
                kernel_p.adjoint(y.view()).unwrap(),
            ),
            _ => (
                kernel_z.apply(x.view()).unwrap(),
                kernel_z.adjoint(y.view()).unwrap(),
            ),
        };
        let err = (dot4(&hx, &y) - dot4(&x, &hty)).abs() / (norm4(&x) * norm4(&y));
        assert!(err <= 1e-10, "[FAIL] adjoint identity error {err:.3e}");
        worst_adj = worst_adj.max(err);
    }

    let mut worst_proj: f64 = 0.0;
    for _ in 0..1000 {
        let x = Array4::from_shape_fn((1, 2, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let hx = fourier.apply(x.view()).unwrap();
        let hhx = fourier.apply(hx.view()).unwrap();
        let htx = fourier.adjoint(x.view()).unwrap();
        let idem = hx
            .iter()
            .zip(hhx.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let sym = hx
            .iter()
            .zip(htx.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(idem <= 1e-10 && sym <= 1e-10, "[FAIL] projector laws: {idem:.3e}/{sym:.3e}");
        worst_proj = worst_proj.max(idem.max(sym));
    }

    let mut worst_mass: f64 = 0.0;
    for _ in 0..1000 {
        let x = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let hx = kernel_p.apply(x.view()).unwrap();
        let expect = kernel_p.kernel().sum() * x.sum();
        let err = (hx.sum() - expect).abs();
        assert!(err <= 1e-10, "[FAIL] mass conservation error {err:.3e}");
        worst_mass = worst_mass.max(err);
    }

    // Full-mask operator is the identity.
    let full = KnownLinearOperator::FourierSubsample {
        mask: Array2::from_elem((16, 16), true),
    };
    let mut worst_id: f64 = 0.0;
    for _ in 0..1000 {
        let x = Array4::from_shape_fn((1, 2, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let hx = full.apply(x.view()).unwrap();
        let err = x
            .iter()
            .zip(hx.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err <= 1e-10, "[FAIL] full-mask identity error {err:.3e}");
        worst_id = worst_id.max(err);
    }
    println!(
        "[PASS] criterion 04: operator algebra holds over 1000 trials each (adjoint {worst_adj:.1e}, projector {worst_proj:.1e}, mass {worst_mass:.1e}, identity {worst_id:.1e})"
    );
}

/// Two-layer toy image map: conv -> leaky relu -> conv, plus the input.
struct ToyNet {
    w1: ArrayD<f64>,
    w2: ArrayD<f64>,
}

impl ToyNet {
    fn new(rng: &mut ChaCha8Rng, ch: usize) -> Self {
        Self {
            w1: randn(rng, &[2, ch, 3, 3]),
            w2: randn(rng, &[ch, 2, 3, 3]),
        }
    }

    fn params(&self) -> Vec<ArrayD<f64>> {
        vec![self.w1.clone(), self.w2.clone()]
    }

    fn map(ids: &[NodeId]) -> impl TapeMap {
        let (w1, w2) = (ids[0], ids[1]);
        move |t: &mut Tape, x: NodeId| {
            let h = t.conv2d(x, w1, Boundary::Periodic);
            let h = t.leaky_relu(h, 0.2);
            let y = t.conv2d(h, w2, Boundary::Periodic);
            t.add(y, x)
        }
    }

    /// Per-sample potential with a mean head (optionally sigmoid).
    fn potential(ids: &[NodeId], pixels: usize, sigmoid: bool) -> impl TapePotential {
        let (w1, w2) = (ids[0], ids[1]);
        move |t: &mut Tape, x: NodeId| {
            let h = t.conv2d(x, w1, Boundary::Periodic);
            let h = t.leaky_relu(h, 0.2);
            let y = t.conv2d(h, w2, Boundary::Periodic);
            let s = t.sum_per_sample(y);
            let s = t.mul_scalar(s, 1.0 / pixels as f64);
            if sigmoid {
                t.sigmoid(s)
            } else {
                s
            }
        }
    }
}

/// Central finite differences of `f` at `params`; returns the gradient
/// estimate flattened per tensor.
fn finite_difference<F>(params: &[ArrayD<f64>], f: F) -> Vec<ArrayD<f64>>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let eps = 1e-6;
    let mut out = Vec::new();
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    for k in 0..params.len() {
        let mut g = ArrayD::zeros(params[k].raw_dim());
        for idx in 0..params[k].len() {
            let orig = work[k].as_slice().unwrap()[idx];
            work[k].as_slice_mut().unwrap()[idx] = orig + eps;
            let fp = f(&work);
            work[k].as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&work);
            work[k].as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

fn vector_relative_error(analytic: &[ArrayD<f64>], fd: &[ArrayD<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in analytic.iter().zip(fd) {
        for (x, y) in a.iter().zip(b.iter()) {
            num += (x - y) * (x - y);
            den += y * y;
        }
    }
    (num / den.max(1e-300)).sqrt()
}

#[test]
fn criterion_05_gradient_integrity() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x0 = randn(&mut rng, &[2, 2, 4, 4]);
    let y0 = randn(&mut rng, &[2, 2, 4, 4]);
    let gen = ToyNet::new(&mut rng, 3);
    let fwd = ToyNet::new(&mut rng, 2);
    let phi = ToyNet::new(&mut rng, 3);
    let psi = ToyNet::new(&mut rng, 2);
    let kernel0 = randn(&mut rng, &[1, 1, 3, 3]);
    let mask = make_mask(
        &MaskSpec {
            acceleration: 2,
            acs_fraction: 0.25,
            pattern: MaskPattern::UniformRandomLines,
        },
        (4, 4),
        3,
    )
    .unwrap();
    let known = std::sync::Arc::new(KnownLinearOperator::FourierSubsample { mask });
    let alphas = [0.3, 0.8];
    let pixels = 2 * 4 * 4;

    // Each case: (label, parameter tensors, loss evaluator returning the
    // scalar and optionally the analytic gradients).
    type Eval = Box<dyn Fn(&[ArrayD<f64>], bool) -> (f64, Option<Vec<ArrayD<f64>>>)>;
    let mut cases: Vec<(&str, Vec<ArrayD<f64>>, Eval)> = Vec::new();

    // pls cost with g and h toy nets.
    {
        let (x0, y0) = (x0.clone(), y0.clone());
        let params: Vec<ArrayD<f64>> = gen.params().into_iter().chain(fwd.params()).collect();
        cases.push((
            "pls_cost",
            params,
            Box::new(move |p, want_grad| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = p.iter().map(|a| t.leaf(a.clone())).collect();
                let x = t.constant(x0.clone());
                let y = t.constant(y0.clone());
                let g = ToyNet::map(&ids[0..2]);
                let h = ToyNet::map(&ids[2..4]);
                let loss = pls_cost(&mut t, x, y, &g, &h).unwrap();
                let v = t.scalar_value(loss);
                let grads = want_grad.then(|| t.gradients(loss, &ids));
                (v, grads)
            }),
        ));
    }

    // cycle loss through the learnable kernel (variant b return path).
    {
        let (x0, y0) = (x0.clone(), y0.clone());
        let params: Vec<ArrayD<f64>> = gen
            .params()
            .into_iter()
            .chain([kernel0.clone()])
            .collect();
        cases.push((
            "cycle_loss_b",
            params,
            Box::new(move |p, want_grad| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = p.iter().map(|a| t.leaf(a.clone())).collect();
                let x = t.constant(x0.clone());
                let y = t.constant(y0.clone());
                let g = ToyNet::map(&ids[0..2]);
                let kid = ids[2];
                let fwd = move |t: &mut Tape, v: NodeId| {
                    // Depthwise: same 1-channel kernel on each channel.
                    let c0 = t.slice_channels(v, 0, 1);
                    let c1 = t.slice_channels(v, 1, 2);
                    let b0 = t.conv2d(c0, kid, Boundary::Periodic);
                    let b1 = t.conv2d(c1, kid, Boundary::Periodic);
                    t.concat_channels(b0, b1)
                };
                let loss = cycle_loss(&mut t, x, y, &g, &fwd).unwrap();
                let v = t.scalar_value(loss);
                let grads = want_grad.then(|| t.gradients(loss, &ids));
                (v, grads)
            }),
        ));
    }

    // Adversarial potential losses for variants b, c, d.
    for variant in [VariantId::LinearB, VariantId::KnownC, VariantId::UnknownD] {
        let (x0, y0) = (x0.clone(), y0.clone());
        let known = known.clone();
        let kernel0 = kernel0.clone();
        let mut params: Vec<ArrayD<f64>> =
            gen.params().into_iter().chain(phi.params()).collect();
        match variant {
            VariantId::LinearB => {
                params.push(kernel0.clone());
                params.extend(psi.params());
            }
            VariantId::UnknownD => {
                params.extend(fwd.params());
                params.extend(psi.params());
            }
            _ => {}
        }
        let label = match variant {
            VariantId::LinearB => "otdisc_b",
            VariantId::KnownC => "otdisc_c",
            _ => "otdisc_d",
        };
        cases.push((
            label,
            params,
            Box::new(move |p, want_grad| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = p.iter().map(|a| t.leaf(a.clone())).collect();
                let x = t.constant(x0.clone());
                let y = t.constant(y0.clone());
                let g = ToyNet::map(&ids[0..2]);
                let phi_pot = ToyNet::potential(&ids[2..4], pixels, false);
                let (gen_part, _) = match variant {
                    VariantId::KnownC => {
                        let op = known.clone();
                        let fwd_map =
                            move |t: &mut Tape, v: NodeId| t.linear_op(v, op.clone(), false);
                        otdisc_loss(&mut t, variant, x, y, &g, &fwd_map, &phi_pot, None)
                            .unwrap()
                    }
                    VariantId::LinearB => {
                        let kid = ids[4];
                        let fwd_map = move |t: &mut Tape, v: NodeId| {
                            let c0 = t.slice_channels(v, 0, 1);
                            let c1 = t.slice_channels(v, 1, 2);
                            let b0 = t.conv2d(c0, kid, Boundary::Periodic);
                            let b1 = t.conv2d(c1, kid, Boundary::Periodic);
                            t.concat_channels(b0, b1)
                        };
                        let psi_pot = ToyNet::potential(&ids[5..7], pixels, false);
                        otdisc_loss(
                            &mut t,
                            variant,
                            x,
                            y,
                            &g,
                            &fwd_map,
                            &phi_pot,
                            Some(&psi_pot),
                        )
                        .unwrap()
                    }
                    _ => {
                        let fwd_map = ToyNet::map(&ids[4..6]);
                        let psi_pot = ToyNet::potential(&ids[6..8], pixels, false);
                        otdisc_loss(
                            &mut t,
                            variant,
                            x,
                            y,
                            &g,
                            &fwd_map,
                            &phi_pot,
                            Some(&psi_pot),
                        )
                        .unwrap()
                    }
                };
                let v = t.scalar_value(gen_part);
                let grads = want_grad.then(|| t.gradients(gen_part, &ids));
                (v, grads)
            }),
        ));
    }

    // Gradient penalty through a two-layer critic (double backprop).
    {
        let (x0, y0) = (x0.clone(), y0.clone());
        cases.push((
            "gradient_penalty",
            phi.params(),
            Box::new(move |p, want_grad| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = p.iter().map(|a| t.leaf(a.clone())).collect();
                let real = t.constant(x0.clone());
                let fake = t.constant(y0.clone());
                let pot = ToyNet::potential(&ids, pixels, false);
                let gp = gradient_penalty(&mut t, &pot, real, fake, 10.0, &alphas).unwrap();
                let v = t.scalar_value(gp);
                let grads = want_grad.then(|| t.gradients(gp, &ids));
                (v, grads)
            }),
        ));
    }

    // Log-likelihood baseline (row a) with sigmoid heads.
    {
        let (x0, y0) = (x0.clone(), y0.clone());
        let params: Vec<ArrayD<f64>> = gen
            .params()
            .into_iter()
            .chain(fwd.params())
            .chain(phi.params())
            .chain(psi.params())
            .collect();
        cases.push((
            "standard_a",
            params,
            Box::new(move |p, want_grad| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = p.iter().map(|a| t.leaf(a.clone())).collect();
                let x = t.constant(x0.clone());
                let y = t.constant(y0.clone());
                let g = ToyNet::map(&ids[0..2]);
                let f = ToyNet::map(&ids[2..4]);
                let phi_pot = ToyNet::potential(&ids[4..6], pixels, true);
                let psi_pot = ToyNet::potential(&ids[6..8], pixels, true);
                let (adv, _) =
                    standard_cyclegan_losses(&mut t, x, y, &g, &f, &phi_pot, &psi_pot).unwrap();
                let v = t.scalar_value(adv);
                let grads = want_grad.then(|| t.gradients(adv, &ids));
                (v, grads)
            }),
        ));
    }

    let mut worst: f64 = 0.0;
    for (label, params, eval) in &cases {
        let (_, grads) = eval(params, true);
        let analytic = grads.unwrap();
        let fd = finite_difference(params, |p| eval(p, false).0);
        let rel = vector_relative_error(&analytic, &fd);
        assert!(rel <= 1e-4, "[FAIL] {label}: relative gradient error {rel:.3e}");
        worst = worst.max(rel);
    }

    // Closed-form linear-critic penalty: eta (||w|| - 1)^2 to 1e-10.
    {
        let w = vec![3.0, 4.0];
        let mut t = Tape::new();
        let real = t.constant(randn(&mut rng, &[2, 1, 1, 2]));
        let fake = t.constant(randn(&mut rng, &[2, 1, 1, 2]));
        let w0 = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), w).unwrap();
        let pot = move |t: &mut Tape, x: NodeId| {
            let shape = t.value(x).shape().to_vec();
            let mut full = ArrayD::zeros(IxDyn(&shape));
            for mut lane in full.axis_iter_mut(ndarray::Axis(0)) {
                lane.assign(&w0);
            }
            let wc = t.constant(full);
            let p = t.mul(x, wc);
            t.sum_per_sample(p)
        };
        let eta = 10.0;
        let gp = gradient_penalty(&mut t, &pot, real, fake, eta, &[0.4, 0.6]).unwrap();
        let err = (t.scalar_value(gp) - eta * 16.0).abs();
        assert!(err <= 1e-10, "[FAIL] linear GP closed form off by {err:.3e}");
    }
    println!(
        "[PASS] criterion 05: all loss gradients match central differences within 1e-4 relative (worst {worst:.2e}); linear GP closed form within 1e-10"
    );
}

#[test]
fn criterion_06_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst_psnr: f64 = 0.0;
    let mut worst_ssim: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(8..128);
        let x = ArrayD::<f64>::from_shape_fn(IxDyn(&[n]), |_| rng.gen_range(-1.0..1.0));
        let y = ArrayD::<f64>::from_shape_fn(IxDyn(&[n]), |_| rng.gen_range(-1.0..1.0));
        // Loop oracles evaluated with plain scalar arithmetic.
        let nf = n as f64;
        let mut peak = 0.0f64;
        let mut err = 0.0f64;
        let (mut mx, mut my) = (0.0f64, 0.0f64);
        for i in 0..n {
            peak = peak.max(y[[i]].abs());
            let d = x[[i]] - y[[i]];
            err += d * d;
            mx += x[[i]];
            my += y[[i]];
        }
        mx /= nf;
        my /= nf;
        let psnr_oracle = 20.0 * (nf * peak / err.sqrt()).log10();
        let got = psnr(x.view(), y.view(), PsnrMode::Paper).unwrap();
        let dp = (got - psnr_oracle).abs();
        assert!(dp <= 1e-9, "[FAIL] psnr oracle mismatch {dp:.2e}");
        worst_psnr = worst_psnr.max(dp);

        let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
        for i in 0..n {
            vx += (x[[i]] - mx) * (x[[i]] - mx);
            vy += (y[[i]] - my) * (y[[i]] - my);
            cv += (x[[i]] - mx) * (y[[i]] - my);
        }
        vx /= nf;
        vy /= nf;
        cv /= nf;
        let (c1, c2) = (1e-4, 9e-4);
        let ssim_oracle =
            ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        let got = ssim(x.view(), y.view(), c1, c2).unwrap();
        let ds = (got - ssim_oracle).abs();
        assert!(ds <= 1e-9, "[FAIL] ssim oracle mismatch {ds:.2e}");
        worst_ssim = worst_ssim.max(ds);

        let self_sim = ssim(x.view(), x.view(), c1, c2).unwrap();
        assert_eq!(self_sim, 1.0, "[FAIL] ssim(x,x) != 1 exactly");
    }
    println!(
        "[PASS] criterion 06: PSNR/SSIM match scalar-loop oracles on 100 pairs (worst {worst_psnr:.2e}/{worst_ssim:.2e}); ssim(x,x) = 1 exactly"
    );
}

/// Normalized cross-correlation maximized over circular shifts: the blind
/// estimate recovers the PSF only up to translation.
fn kernel_ncc(learned: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let (kh, kw) = learned.dim();
    let nl = learned.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = f64::NEG_INFINITY;
    for da in 0..kh {
        for db in 0..kw {
            let mut dot = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    dot += learned[[a, b]] * truth[[(a + da) % kh, (b + db) % kw]];
                }
            }
            best = best.max(dot / (nl * nt).max(1e-300));
        }
    }
    best
}

struct DeskRun {
    delta_psnr_db: f64,
    kernel_ncc: Option<f64>,
    wall_s: f64,
}

fn desk_run(config_text: &str, seed: u64, true_psf: Option<(usize, f64)>) -> DeskRun {
    let start = Instant::now();
    let mut config = ExperimentConfig::from_str(config_text).unwrap();
    config.experiment.seed = seed;
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_experiment(&config, dir.path()).unwrap();
    let delta = manifest.metrics.recon_psnr_paper.median
        - manifest.metrics.baseline_psnr_paper.median;
    let kernel_ncc_value = true_psf.map(|(size, sigma)| {
        let run_dir = dir
            .path()
            .join(format!("run-{}-s{}", &manifest.config_hash[..12], seed));
        let bundle = load_checkpoint(&run_dir.join("checkpoints/final")).unwrap();
        let (_, _, params) = bundle.component("kernel").expect("kernel component");
        let flat = params.flatten();
        let learned = Array2::from_shape_vec((size, size), flat).unwrap();
        let truth = LearnableConvKernel::gaussian(size, sigma, Boundary::Periodic)
            .kernel()
            .clone();
        kernel_ncc(&learned, &truth)
    });
    DeskRun {
        delta_psnr_db: delta,
        kernel_ncc: kernel_ncc_value,
        wall_s: start.elapsed().as_secs_f64(),
    }
}

const DECONV_CONFIG: &str = r#"
[experiment]
variant = "b"
seed = 0

[dataset]
kind = "point-sources"
size = 32
count = 200
test_count = 20
channels = 1
noise = { model = "gaussian", sigma = 0.02 }
sources = 14
amplitude = 1.0

[forward]
kind = "conv-kernel"
size = 9
sigma = 1.5

[generator]
depth = 2
base_channels = 8

[discriminator]
style = "patch"
blocks = 2
head = "linear"
base_channels = 8

[kernel]
size = 9

[optimizer]
lr = 1e-3
beta1 = 0.5
beta2 = 0.9
n_critic = 3
batch_size = 4
epochs = 20
kernel_lr_mult = 8.0

[loss]
gamma = 3.0
lipschitz = { mode = "gradient-penalty", eta = 10.0 }
"#;

#[test]
fn criterion_07_desk_scale_deconvolution() {
    let mut passes = 0;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let run = desk_run(DECONV_CONFIG, seed, Some((9, 1.5)));
        let ncc = run.kernel_ncc.unwrap();
        let ok = run.delta_psnr_db >= 2.0 && ncc >= 0.8;
        assert!(
            run.wall_s < 1800.0,
            "[FAIL] deconvolution run exceeded 30 min CPU"
        );
        details.push(format!(
            "seed {seed}: dPSNR {:+.2} dB, kernel NCC {:.3} ({:.0}s){}",
            run.delta_psnr_db,
            ncc,
            run.wall_s,
            if ok { "" } else { " <-- miss" }
        ));
        if ok {
            passes += 1;
        }
    }
    assert!(
        passes >= 4,
        "[FAIL] deconvolution: only {passes}/5 seeds reached +2 dB with NCC >= 0.8\n{}",
        details.join("\n")
    );
    println!(
        "[PASS] criterion 07: deconvolution beats the blurred input by >= 2 dB with kernel NCC >= 0.8 on {passes}/5 seeds\n       {}",
        details.join("\n       ")
    );
}

const MRI_CONFIG: &str = r#"
[experiment]
variant = "c"
seed = 0

[dataset]
kind = "phantom"
size = 32
count = 200
test_count = 20
channels = 2
noise = { model = "gaussian", sigma = 0.01 }

[forward]
kind = "fourier-subsample"
acceleration = 2
acs_fraction = 0.125

[generator]
depth = 2
base_channels = 8

[discriminator]
style = "patch"
blocks = 2
head = "linear"
base_channels = 8

[optimizer]
lr = 1e-3
beta1 = 0.5
beta2 = 0.9
n_critic = 2
batch_size = 4
epochs = 5

[loss]
gamma = 10.0
lipschitz = { mode = "gradient-penalty", eta = 10.0 }
"#;

#[test]
fn criterion_08_desk_scale_accelerated_mri() {
    let mut passes = 0;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let run = desk_run(MRI_CONFIG, seed, None);
        let ok = run.delta_psnr_db >= 1.0;
        assert!(run.wall_s < 1800.0, "[FAIL] MRI run exceeded 30 min CPU");
        details.push(format!(
            "seed {seed}: dPSNR {:+.2} dB ({:.0}s){}",
            run.delta_psnr_db,
            run.wall_s,
            if ok { "" } else { " <-- miss" }
        ));
        if ok {
            passes += 1;
        }
    }
    assert!(
        passes >= 4,
        "[FAIL] accelerated MRI: only {passes}/5 seeds beat the zero-filled input by 1 dB\n{}",
        details.join("\n")
    );
    println!(
        "[PASS] criterion 08: undersampled reconstruction beats zero-filled input by >= 1 dB on {passes}/5 seeds\n       {}",
        details.join("\n       ")
    );
}

const DENOISE_CONFIG: &str = r#"
[experiment]
variant = "d"
seed = 0

[dataset]
kind = "phantom"
size = 32
count = 200
test_count = 20
channels = 1
noise = { model = "mixed-streak", sigma = 0.08, streaks = 3, streak_amp = 0.25 }

[forward]
kind = "identity"

[generator]
depth = 2
base_channels = 8

[discriminator]
style = "patch"
blocks = 2
head = "linear"
base_channels = 8

[operator_net]
depth = 1
base_channels = 8

[optimizer]
lr = 1e-3
beta1 = 0.5
beta2 = 0.9
n_critic = 3
batch_size = 4
epochs = 16

[loss]
gamma = 3.0
lipschitz = { mode = "gradient-penalty", eta = 10.0 }
"#;

#[test]
fn criterion_09_desk_scale_denoising() {
    let mut passes = 0;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let run = desk_run(DENOISE_CONFIG, seed, None);
        let ok = run.delta_psnr_db >= 2.0;
        assert!(run.wall_s < 1800.0, "[FAIL] denoising run exceeded 30 min CPU");
        details.push(format!(
            "seed {seed}: dPSNR {:+.2} dB ({:.0}s){}",
            run.delta_psnr_db,
            run.wall_s,
            if ok { "" } else { " <-- miss" }
        ));
        if ok {
            passes += 1;
        }
    }
    assert!(
        passes >= 4,
        "[FAIL] denoising: only {passes}/5 seeds beat the noisy input by 2 dB\n{}",
        details.join("\n")
    );
    println!(
        "[PASS] criterion 09: denoising beats the noisy input by >= 2 dB on {passes}/5 seeds\n       {}",
        details.join("\n       ")
    );
}

#[test]
fn criterion_10_variant_structure() {
    use otcycle_core::losses::VariantId;
    use otcycle_core::models::{
        DiscHead, DiscStyle, DiscriminatorSpec, GeneratorSpec, LipschitzMode, NormKind,
    };
    use otcycle_core::trainer::{save_checkpoint, ComponentKind, ModelConfig, TrainState};

    let model = |channels: usize, head: DiscHead| ModelConfig {
        generator: GeneratorSpec {
            depth: 2,
            base_channels: 8,
            norm: NormKind::Instance,
            in_channels: channels,
            out_channels: channels,
        },
        discriminator: DiscriminatorSpec {
            style: DiscStyle::Patch,
            blocks: 2,
            head,
            base_channels: 8,
            norm: NormKind::Instance,
            in_channels: channels,
            input_hw: (16, 16),
        },
        operator_net: GeneratorSpec {
            depth: 2,
            base_channels: 8,
            norm: NormKind::Instance,
            in_channels: channels,
            out_channels: channels,
        },
        kernel_size: 9,
        kernel_boundary: Boundary::Periodic,
    };
    let mask = make_mask(
        &MaskSpec {
            acceleration: 2,
            acs_fraction: 0.1,
            pattern: MaskPattern::UniformRandomLines,
        },
        (16, 16),
        1,
    )
    .unwrap();
    let gp = LipschitzMode::GradientPenalty { eta: 10.0 };

    let inspect = |state: &TrainState| -> Vec<(String, String, usize)> {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), state, 0, "structure").unwrap();
        let bundle = load_checkpoint(dir.path()).unwrap();
        bundle
            .manifest
            .components
            .iter()
            .map(|c| {
                let kind = match c.kind {
                    ComponentKind::Generator { .. } => "generator",
                    ComponentKind::Kernel { .. } => "kernel",
                    ComponentKind::OperatorNet { .. } => "operator-net",
                    ComponentKind::Discriminator { .. } => "discriminator",
                };
                (c.name.clone(), kind.to_string(), c.param_count)
            })
            .collect()
    };

    // Variant c: exactly one generator and one discriminator.
    let c = TrainState::new(
        VariantId::KnownC,
        &model(2, DiscHead::Linear),
        Some(KnownLinearOperator::FourierSubsample { mask }),
        gp,
        10.0,
        1,
        2,
    )
    .unwrap();
    let entries = inspect(&c);
    assert_eq!(entries.len(), 2, "[FAIL] variant c roster: {entries:?}");
    assert_eq!(entries[0].1, "generator");
    assert_eq!(entries[1].1, "discriminator");

    // Variant b: the second generator is a single 9x9 kernel.
    let b = TrainState::new(
        VariantId::LinearB,
        &model(1, DiscHead::Linear),
        None,
        gp,
        10.0,
        1,
        2,
    )
    .unwrap();
    let entries = inspect(&b);
    assert_eq!(entries.len(), 4, "[FAIL] variant b roster: {entries:?}");
    assert_eq!(entries[1].1, "kernel");
    assert_eq!(entries[1].2, 81, "[FAIL] kernel must hold exactly 9x9 values");
    assert_eq!(entries[2].1, "discriminator");
    assert_eq!(entries[3].1, "discriminator");

    // Variant d: two deep generators and two discriminators.
    let d = TrainState::new(
        VariantId::UnknownD,
        &model(1, DiscHead::Linear),
        None,
        gp,
        10.0,
        1,
        2,
    )
    .unwrap();
    let entries = inspect(&d);
    assert_eq!(entries.len(), 4, "[FAIL] variant d roster: {entries:?}");
    assert_eq!(entries[0].1, "generator");
    assert_eq!(entries[1].1, "operator-net");
    assert!(
        entries[1].2 > 1000,
        "[FAIL] the operator estimate must be a deep network, got {} params",
        entries[1].2
    );
    assert_eq!(entries[2].1, "discriminator");
    assert_eq!(entries[3].1, "discriminator");

    // Variant a: two deep generators and two sigmoid critics.
    let a = TrainState::new(
        VariantId::StandardA,
        &model(1, DiscHead::Sigmoid),
        None,
        gp,
        10.0,
        1,
        2,
    )
    .unwrap();
    let entries = inspect(&a);
    assert_eq!(entries.len(), 4);
    assert_eq!(entries[1].1, "operator-net");
    println!(
        "[PASS] criterion 10: component manifests match the architecture table (c: G+phi, b: G+9x9 kernel+2 critics, d: 2 deep generators+2 critics)"
    );
}

#[test]
fn criterion_11_determinism() {
    let config = r#"
[experiment]
variant = "c"
seed = 5

[dataset]
kind = "phantom"
size = 16
count = 12
test_count = 4
channels = 2
noise = { model = "gaussian", sigma = 0.02 }

[forward]
kind = "fourier-subsample"
acceleration = 2
acs_fraction = 0.125

[generator]
depth = 1
base_channels = 4

[discriminator]
style = "global-scalar"
blocks = 1
head = "linear"
base_channels = 4

[optimizer]
lr = 1e-3
beta1 = 0.5
beta2 = 0.9
n_critic = 2
batch_size = 3
epochs = 2

[loss]
gamma = 10.0
lipschitz = { mode = "gradient-penalty", eta = 10.0 }
"#;
    let cfg = ExperimentConfig::from_str(config).unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_experiment(&cfg, dir.path()).unwrap();
        let run_dir = dir
            .path()
            .join(format!("run-{}-s5", &manifest.config_hash[..12]));
        (
            std::fs::read(run_dir.join("loss_log.jsonl")).unwrap(),
            manifest.metrics.recon_psnr_paper.median,
        )
    };
    let (log1, m1) = run();
    let (log2, m2) = run();
    assert_eq!(log1, log2, "[FAIL] loss logs differ bitwise");
    assert_eq!(m1.to_bits(), m2.to_bits(), "[FAIL] metric summaries differ");
    println!(
        "[PASS] criterion 11: identical config+seed reproduces bitwise-identical loss logs ({} bytes)",
        log1.len()
    );
}

#[test]
fn dataset_counting_oracle_holds_for_point_scenes() {
    // Supports the deconvolution criterion: truth pools carry exactly
    // sources x amplitude of mass before blurring.
    let spec = SceneSpec {
        kind: SceneKind::PointSources,
        size: 32,
        count: 10,
        channels: 1,
        noise: NoiseModel::Gaussian { sigma: 0.0 },
        sources: 14,
        amplitude: 1.0,
    };
    let set = generate(&spec, None, 3, false).unwrap();
    for t in &set.truths {
        assert!((t.sum() - 14.0).abs() < 1e-12);
    }
}
