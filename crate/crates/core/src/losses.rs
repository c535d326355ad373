//! Training objectives: the inverse-path transport cost, cycle-consistency,
//! the adversarial potential losses per architecture variant, the gradient
//! penalty, and the log-likelihood baseline.
//!
//! Sign conventions, in one place: every function returns values to be
//! *minimized*. Critics maximize their objective, so the discriminator part
//! is the negation of the generator part; the gradient penalty is added to
//! the discriminator's minimized objective. The l1-type norm throughout is
//! the mean absolute value per element (the constant rescaling is absorbed
//! by `gamma`).
//!
//! The half factor on the potential difference is applied only when both
//! critics are present; with a known forward path the single remaining
//! potential enters unscaled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// The four architecture rows: log-likelihood baseline, learnable blur
/// kernel, known operator, and unknown neural operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    StandardA,
    LinearB,
    KnownC,
    UnknownD,
}

impl VariantId {
    pub fn uses_second_potential(&self) -> bool {
        !matches!(self, VariantId::KnownC)
    }

    pub fn letter(&self) -> char {
        match self {
            VariantId::StandardA => 'a',
            VariantId::LinearB => 'b',
            VariantId::KnownC => 'c',
            VariantId::UnknownD => 'd',
        }
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBundle {
    pub cycle: f64,
    pub disc: f64,
    pub gp: f64,
    pub total_generator: f64,
    pub total_discriminator: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl LossBundle {
    pub fn new(cycle: f64, disc: f64, gp: f64, gamma: f64, eta: f64) -> Result<Self> {
        let bundle = Self {
            cycle,
            disc,
            gp,
            total_generator: disc + gamma * cycle,
            total_discriminator: -disc + gp,
            gamma,
            eta,
        };
        if !bundle.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss: {bundle:?}")));
        }
        Ok(bundle)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cycle,
            self.disc,
            self.gp,
            self.total_generator,
            self.total_discriminator,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Image-to-image map evaluated on the tape (generators, forward operators).
pub trait TapeMap {
    fn eval(&self, tape: &mut Tape, x: NodeId) -> NodeId;
}

impl<F: Fn(&mut Tape, NodeId) -> NodeId> TapeMap for F {
    fn eval(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        self(tape, x)
    }
}

/// Per-sample critic values `[n]` evaluated on the tape.
pub trait TapePotential {
    fn eval(&self, tape: &mut Tape, x: NodeId) -> NodeId;
}

impl<F: Fn(&mut Tape, NodeId) -> NodeId> TapePotential for F {
    fn eval(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        self(tape, x)
    }
}

fn check_same_shape(tape: &Tape, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

/// Transport cost of one (x, y) pairing:
/// `mean|y - h(x)| + mean|g(y) - x|`. Zero exactly when both consistency
/// residuals vanish.
pub fn pls_cost(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    g: &dyn TapeMap,
    h: &dyn TapeMap,
) -> Result<NodeId> {
    let hx = h.eval(tape, x);
    check_same_shape(tape, hx, y, "pls_cost: h(x) vs y")?;
    let gy = g.eval(tape, y);
    check_same_shape(tape, gy, x, "pls_cost: g(y) vs x")?;
    let r1 = tape.sub(y, hx);
    let d1 = tape.mean_abs(r1);
    let r2 = tape.sub(gy, x);
    let d2 = tape.mean_abs(r2);
    Ok(tape.add(d1, d2))
}

/// Cycle-consistency:
/// `0.5 * (mean|x - g(fwd(x))| + mean|y - fwd(g(y))|)`, the same half factor
/// for every variant. `fwd` is the variant's return path.
pub fn cycle_loss(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    g: &dyn TapeMap,
    fwd: &dyn TapeMap,
) -> Result<NodeId> {
    let fx = fwd.eval(tape, x);
    let gfx = g.eval(tape, fx);
    check_same_shape(tape, gfx, x, "cycle_loss: g(fwd(x)) vs x")?;
    let gy = g.eval(tape, y);
    let fgy = fwd.eval(tape, gy);
    check_same_shape(tape, fgy, y, "cycle_loss: fwd(g(y)) vs y")?;
    let rx = tape.sub(x, gfx);
    let lx = tape.mean_abs(rx);
    let ry = tape.sub(y, fgy);
    let ly = tape.mean_abs(ry);
    let s = tape.add(lx, ly);
    Ok(tape.mul_scalar(s, 0.5))
}

/// Adversarial potential loss of the Wasserstein variants.
///
/// Returns `(generator_part, discriminator_part)` where the generator part
/// is `mean phi(x) - mean phi(g(y))` plus, when a second critic is present,
/// `mean psi(y) - mean psi(fwd(x))`, the pair averaged with a half factor.
/// The discriminator part is the negation.
pub fn otdisc_loss(
    tape: &mut Tape,
    variant: VariantId,
    x: NodeId,
    y: NodeId,
    g: &dyn TapeMap,
    fwd: &dyn TapeMap,
    phi: &dyn TapePotential,
    psi: Option<&dyn TapePotential>,
) -> Result<(NodeId, NodeId)> {
    match variant {
        VariantId::StandardA => {
            return Err(Error::Config(
                "variant a uses the log-likelihood baseline loss".into(),
            ))
        }
        VariantId::KnownC => {
            if psi.is_some() {
                return Err(Error::Config(
                    "variant c has a known forward path; no second critic exists".into(),
                ));
            }
        }
        VariantId::LinearB | VariantId::UnknownD => {
            if psi.is_none() {
                return Err(Error::Config(format!(
                    "variant {} requires a second critic",
                    variant.letter()
                )));
            }
        }
    }

    let phi_x = phi.eval(tape, x);
    let m_real = tape.mean_all(phi_x);
    let gy = g.eval(tape, y);
    let phi_gy = phi.eval(tape, gy);
    let m_fake = tape.mean_all(phi_gy);
    let mut gen = tape.sub(m_real, m_fake);

    if let Some(psi) = psi {
        let psi_y = psi.eval(tape, y);
        let m_meas = tape.mean_all(psi_y);
        let fx = fwd.eval(tape, x);
        let psi_fx = psi.eval(tape, fx);
        let m_synth = tape.mean_all(psi_fx);
        let second = tape.sub(m_meas, m_synth);
        let sum = tape.add(gen, second);
        gen = tape.mul_scalar(sum, 0.5);
    }
    let disc = tape.neg(gen);
    Ok((gen, disc))
}

/// WGAN gradient penalty:
/// `eta * mean_i (||d phi / d x_tilde_i||_2 - 1)^2` on the per-sample
/// interpolates `x_tilde = alpha * real + (1 - alpha) * generated`.
///
/// `alpha` holds one uniform draw per sample; the caller owns the sampling so
/// runs stay reproducible.
pub fn gradient_penalty(
    tape: &mut Tape,
    phi: &dyn TapePotential,
    batch_real: NodeId,
    batch_gen: NodeId,
    eta: f64,
    alpha: &[f64],
) -> Result<NodeId> {
    check_same_shape(tape, batch_real, batch_gen, "gradient_penalty batches")?;
    let shape = tape.value(batch_real).shape().to_vec();
    let n = shape[0];
    if alpha.len() != n {
        return Err(Error::Dimension(format!(
            "{} interpolation weights for {n} samples",
            alpha.len()
        )));
    }
    let a = tape.constant(ndarray::ArrayD::from_shape_vec(
        ndarray::IxDyn(&[n]),
        alpha.to_vec(),
    )
    .expect("alpha shape"));
    let a_b = tape.broadcast_per_sample(a, &shape);
    let one_minus = {
        let neg = tape.neg(a_b);
        tape.add_scalar(neg, 1.0)
    };
    let real_part = tape.mul(a_b, batch_real);
    let gen_part = tape.mul(one_minus, batch_gen);
    let interp = tape.add(real_part, gen_part);

    let values = phi.eval(tape, interp);
    let total = tape.sum_all(values);
    let grad = tape.backward(total, &[interp])[0].ok_or_else(|| {
        Error::Capability(
            "critic output does not depend on its input; no gradient available".into(),
        )
    })?;
    let gsq = tape.mul(grad, grad);
    let per_sample = tape.sum_per_sample(gsq);
    let norms = tape.sqrt(per_sample);
    let shifted = tape.add_scalar(norms, -1.0);
    let sq = tape.mul(shifted, shifted);
    let mean = tape.mean_all(sq);
    Ok(tape.mul_scalar(mean, eta))
}

/// `max(x, c)` built from relu, for the log-loss guard.
fn clamp_min(tape: &mut Tape, x: NodeId, c: f64) -> NodeId {
    let shifted = tape.add_scalar(x, -c);
    let r = tape.relu(shifted);
    tape.add_scalar(r, c)
}

const LOG_GUARD: f64 = 1e-12;

/// Log-likelihood baseline of the two-generator translation setup.
///
/// Returns `(generator_part, discriminator_part)`; both critics must emit
/// values in `[0, 1]` (sigmoid heads), and the logs are clamped at 1e-12 so
/// saturated critics stay finite.
pub fn standard_cyclegan_losses(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    g: &dyn TapeMap,
    f: &dyn TapeMap,
    phi: &dyn TapePotential,
    psi: &dyn TapePotential,
) -> Result<(NodeId, NodeId)> {
    let phi_x = phi.eval(tape, x);
    let gy = g.eval(tape, y);
    let phi_gy = phi.eval(tape, gy);
    let psi_y = psi.eval(tape, y);
    let fx = f.eval(tape, x);
    let psi_fx = psi.eval(tape, fx);
    for &head in &[phi_x, phi_gy, psi_y, psi_fx] {
        if tape.value(head).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain(
                "baseline discriminators must emit values in [0, 1]".into(),
            ));
        }
    }
    let mut terms = Vec::with_capacity(4);
    for (head, flip) in [(phi_x, false), (phi_gy, true), (psi_y, false), (psi_fx, true)] {
        let p = if flip {
            let n = tape.neg(head);
            tape.add_scalar(n, 1.0)
        } else {
            head
        };
        let guarded = clamp_min(tape, p, LOG_GUARD);
        let lg = tape.ln(guarded);
        terms.push(tape.mean_all(lg));
    }
    let s01 = tape.add(terms[0], terms[1]);
    let s23 = tape.add(terms[2], terms[3]);
    let adv = tape.add(s01, s23);
    let disc = tape.neg(adv);
    Ok((adv, disc))
}
