//! Alternating adversarial training: `n_critic` critic ascent steps per
//! generator descent step, Adam throughout, deterministic given seeds.
//!
//! Component roster per variant:
//! `a`: two deep generators and two sigmoid critics;
//! `b`: one deep generator, one learnable blur kernel, two linear critics;
//! `c`: one generator and one critic (the forward operator is known);
//! `d`: two deep generators (one is the operator estimate) and two critics.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, Ix4, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Boundary;
use crate::data::{derive_seed, ImagePool};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{
    cycle_loss, gradient_penalty, otdisc_loss, standard_cyclegan_losses, LossBundle, VariantId,
};
use crate::models::{
    discriminator_layer_catalog, discriminator_potential, enforce_lipschitz, generator_apply,
    generator_forward, init_discriminator, init_generator, DiscHead, DiscriminatorSpec,
    GeneratorSpec, LipschitzMode, ParamSet,
};
use crate::physics::{KnownLinearOperator, LearnableConvKernel};
use crate::tape::{NodeId, Tape};

/// Optimizer settings; defaults follow the training recipe of the reference
/// experiments (Adam with beta = (0.5, 0.9), rate 1e-4, five critic updates
/// per generator update).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rate multiplier for the learnable blur kernel (its 81-odd parameters
    /// otherwise converge far slower than the deep components).
    #[serde(default = "default_kernel_lr_mult")]
    pub kernel_lr_mult: f64,
}

fn default_kernel_lr_mult() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            n_critic: 5,
            batch_size: 1,
            epochs: 100,
            kernel_lr_mult: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_critic < 1 {
            return Err(Error::Config("n_critic must be >= 1".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.kernel_lr_mult < 0.0 {
            return Err(Error::Config("kernel_lr_mult must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-component Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params
                .entries
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
            v: params
                .entries
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
            t: 0,
        }
    }

    const EPS: f64 = 1e-8;

    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &[ArrayD<f64>],
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) {
        assert_eq!(grads.len(), params.entries.len());
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((entry, m), (v, g)) in params
            .entries
            .iter_mut()
            .zip(&mut self.m)
            .zip(self.v.iter_mut().zip(grads))
        {
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + Self::EPS);
                });
        }
    }
}

/// What a trainable component is.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum ComponentKind {
    Generator { spec: GeneratorSpec },
    Kernel { size: usize, boundary: Boundary },
    OperatorNet { spec: GeneratorSpec },
    Discriminator { spec: DiscriminatorSpec },
}

#[derive(Debug, Clone)]
pub struct Component {
    pub name: String,
    pub kind: ComponentKind,
    pub params: ParamSet,
    pub adam: AdamState,
}

/// Network shapes for every live component of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Second generator spec for variants a and d.
    pub operator_net: GeneratorSpec,
    /// Blur kernel size for variant b.
    pub kernel_size: usize,
    pub kernel_boundary: Boundary,
}

/// Live training state: components, RNG for the penalty interpolation, and
/// the frozen problem description.
#[derive(Debug)]
pub struct TrainState {
    pub variant: VariantId,
    pub step: u64,
    pub epoch: usize,
    pub components: Vec<Component>,
    pub known_op: Option<Arc<KnownLinearOperator>>,
    pub lipschitz: LipschitzMode,
    pub gamma: f64,
    gp_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        variant: VariantId,
        model: &ModelConfig,
        known_op: Option<KnownLinearOperator>,
        lipschitz: LipschitzMode,
        gamma: f64,
        init_seed: u64,
        gp_seed: u64,
    ) -> Result<Self> {
        validate_roster(variant, model, known_op.as_ref(), &lipschitz)?;
        let mut components = Vec::new();
        let mut add = |name: &str, kind: ComponentKind, params: ParamSet| {
            let adam = AdamState::new(&params);
            components.push(Component {
                name: name.into(),
                kind,
                params,
                adam,
            });
        };
        add(
            "g",
            ComponentKind::Generator {
                spec: model.generator,
            },
            init_generator(&model.generator, derive_seed(init_seed, "g")),
        );
        match variant {
            VariantId::StandardA => add(
                "f",
                ComponentKind::OperatorNet {
                    spec: model.operator_net,
                },
                init_generator(&model.operator_net, derive_seed(init_seed, "f")),
            ),
            VariantId::LinearB => {
                let k = model.kernel_size;
                let delta = LearnableConvKernel::delta(k, model.kernel_boundary);
                let mut params = ParamSet::default();
                params.push(
                    "kernel.weight",
                    delta
                        .kernel()
                        .clone()
                        .into_shape_with_order(IxDyn(&[1, 1, k, k]))
                        .expect("kernel shape"),
                );
                add(
                    "kernel",
                    ComponentKind::Kernel {
                        size: k,
                        boundary: model.kernel_boundary,
                    },
                    params,
                );
            }
            VariantId::KnownC => {}
            VariantId::UnknownD => add(
                "h",
                ComponentKind::OperatorNet {
                    spec: model.operator_net,
                },
                init_generator(&model.operator_net, derive_seed(init_seed, "h")),
            ),
        }
        add(
            "phi",
            ComponentKind::Discriminator {
                spec: model.discriminator,
            },
            init_discriminator(&model.discriminator, derive_seed(init_seed, "phi")),
        );
        if variant.uses_second_potential() {
            let mut psi_spec = model.discriminator;
            psi_spec.in_channels = match variant {
                VariantId::StandardA | VariantId::UnknownD | VariantId::LinearB => {
                    model.generator.in_channels
                }
                VariantId::KnownC => unreachable!(),
            };
            add(
                "psi",
                ComponentKind::Discriminator { spec: psi_spec },
                init_discriminator(&psi_spec, derive_seed(init_seed, "psi")),
            );
        }
        Ok(Self {
            variant,
            step: 0,
            epoch: 0,
            components,
            known_op: known_op.map(Arc::new),
            lipschitz,
            gamma,
            gp_rng: ChaCha8Rng::seed_from_u64(gp_seed),
        })
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    fn component_index(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c.name == name)
    }

    /// Names of components updated in the generator step.
    fn generator_side(&self) -> Vec<&'static str> {
        match self.variant {
            VariantId::StandardA => vec!["g", "f"],
            VariantId::LinearB => vec!["g", "kernel"],
            VariantId::KnownC => vec!["g"],
            VariantId::UnknownD => vec!["g", "h"],
        }
    }

    fn critic_side(&self) -> Vec<&'static str> {
        if self.variant.uses_second_potential() {
            vec!["phi", "psi"]
        } else {
            vec!["phi"]
        }
    }

    /// Generator output for a measurement batch, off the tape.
    pub fn reconstruct(&self, y: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let g = self.component("g").expect("generator present");
        let ComponentKind::Generator { spec } = &g.kind else {
            unreachable!()
        };
        let batch = y
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Dimension("expected [n, c, h, w]".into()))?;
        Ok(generator_apply(spec, &g.params, batch)?.into_dyn())
    }

    /// Synthetic measurement of a truth batch under the current forward
    /// path (identity for the unknown-operator variants at evaluation time
    /// is not meaningful; this is the training-side forward).
    fn forward_offline(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let batch = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Dimension("expected [n, c, h, w]".into()))?;
        match self.variant {
            VariantId::KnownC => {
                let op = self.known_op.as_ref().expect("known operator");
                Ok(op.apply(batch)?.into_dyn())
            }
            VariantId::LinearB => {
                let k = self.component("kernel").expect("kernel");
                let kernel = kernel_matrix(&k.params);
                let op = LearnableConvKernel::new(kernel, kernel_boundary(&k.kind))?;
                Ok(op.apply(batch)?.into_dyn())
            }
            VariantId::StandardA => {
                let f = self.component("f").expect("f");
                let ComponentKind::OperatorNet { spec } = &f.kind else {
                    unreachable!()
                };
                Ok(generator_apply(spec, &f.params, batch)?.into_dyn())
            }
            VariantId::UnknownD => {
                let h = self.component("h").expect("h");
                let ComponentKind::OperatorNet { spec } = &h.kind else {
                    unreachable!()
                };
                Ok(generator_apply(spec, &h.params, batch)?.into_dyn())
            }
        }
    }
}

fn kernel_matrix(params: &ParamSet) -> Array2<f64> {
    let v = &params.entries[0].value;
    let shape = v.shape();
    let (kh, kw) = (shape[2], shape[3]);
    Array2::from_shape_fn((kh, kw), |(a, b)| v[[0, 0, a, b]])
}

fn kernel_boundary(kind: &ComponentKind) -> Boundary {
    match kind {
        ComponentKind::Kernel { boundary, .. } => *boundary,
        _ => Boundary::Periodic,
    }
}

fn validate_roster(
    variant: VariantId,
    model: &ModelConfig,
    known_op: Option<&KnownLinearOperator>,
    lipschitz: &LipschitzMode,
) -> Result<()> {
    model.discriminator.validate()?;
    match variant {
        VariantId::KnownC => {
            if known_op.is_none() {
                return Err(Error::Config(
                    "variant c requires a known forward operator".into(),
                ));
            }
        }
        _ => {
            if known_op.is_some() {
                return Err(Error::Config(format!(
                    "variant {} estimates its forward path; a known operator does not fit",
                    variant.letter()
                )));
            }
        }
    }
    let want_sigmoid = variant == VariantId::StandardA;
    let has_sigmoid = model.discriminator.head == DiscHead::Sigmoid;
    if want_sigmoid != has_sigmoid {
        return Err(Error::Config(format!(
            "variant {} requires a {} critic head",
            variant.letter(),
            if want_sigmoid { "sigmoid" } else { "linear" }
        )));
    }
    if matches!(lipschitz, LipschitzMode::SpectralNorm { .. })
        && model.discriminator.norm != crate::models::NormKind::None
    {
        return Err(Error::Config(
            "spectral normalization requires critics without normalization layers".into(),
        ));
    }
    if variant == VariantId::LinearB && model.generator.in_channels != 1 {
        return Err(Error::Config(
            "the blur-kernel variant operates on single-channel images".into(),
        ));
    }
    Ok(())
}

/// Scalar summary of one critic update.
#[derive(Debug, Clone, Copy)]
pub struct DiscStepInfo {
    /// Adversarial value (generator part) at the sampled batches.
    pub disc: f64,
    pub gp: f64,
    pub total_d: f64,
}

/// Scalar summary of one generator update.
#[derive(Debug, Clone, Copy)]
pub struct GenStepInfo {
    pub cycle: f64,
    pub disc: f64,
    pub total_g: f64,
}

fn to4(x: &ArrayD<f64>) -> ndarray::Array4<f64> {
    x.view()
        .into_dimensionality::<Ix4>()
        .expect("batch must be rank 4")
        .to_owned()
}

/// One critic ascent step (implemented as descent on the negated loss plus
/// penalty). Generator parameters are read, never written.
pub fn discriminator_step(
    state: &mut TrainState,
    opt: &OptimizerConfig,
    x_batch: &ArrayD<f64>,
    y_batch: &ArrayD<f64>,
) -> Result<DiscStepInfo> {
    let n = x_batch.shape()[0];
    // Frozen generator-side outputs, computed off the tape.
    let g = state.component("g").expect("generator");
    let ComponentKind::Generator { spec: g_spec } = &g.kind else {
        unreachable!()
    };
    let x_fake = generator_apply(g_spec, &g.params, to4(y_batch).view())?.into_dyn();
    let y_synth = state.forward_offline(x_batch)?;

    let mut tape = Tape::new();
    let x_real = tape.constant(x_batch.clone());
    let y_real = tape.constant(y_batch.clone());
    let x_fake_c = tape.constant(x_fake.clone());
    let y_synth_c = tape.constant(y_synth.clone());

    let phi_idx = state.component_index("phi").expect("phi");
    let phi_spec = match state.components[phi_idx].kind {
        ComponentKind::Discriminator { spec } => spec,
        _ => unreachable!(),
    };
    let phi_ids = state.components[phi_idx].params.leaves(&mut tape);
    let psi_idx = state.component_index("psi");
    let psi_data = psi_idx.map(|i| {
        let spec = match state.components[i].kind {
            ComponentKind::Discriminator { spec } => spec,
            _ => unreachable!(),
        };
        (spec, state.components[i].params.leaves(&mut tape))
    });

    let phi_ids_cl = phi_ids.clone();
    let phi_pot =
        move |t: &mut Tape, v: NodeId| discriminator_potential(t, &phi_spec, &phi_ids_cl, v);
    let g_const = move |t: &mut Tape, _v: NodeId| t.detach(x_fake_c);
    let fwd_const = move |t: &mut Tape, _v: NodeId| t.detach(y_synth_c);

    let (disc_value, gp_value, total);
    match state.variant {
        VariantId::StandardA => {
            let (spec, ids) = psi_data.as_ref().expect("psi present");
            let spec = *spec;
            let ids = ids.clone();
            let psi_pot =
                move |t: &mut Tape, v: NodeId| discriminator_potential(t, &spec, &ids, v);
            let (adv, disc_obj) = standard_cyclegan_losses(
                &mut tape, x_real, y_real, &g_const, &fwd_const, &phi_pot, &psi_pot,
            )?;
            disc_value = tape.scalar_value(adv);
            gp_value = 0.0;
            total = disc_obj;
        }
        _ => {
            let psi_cl = psi_data.as_ref().map(|(spec, ids)| {
                let spec = *spec;
                let ids = ids.clone();
                move |t: &mut Tape, v: NodeId| discriminator_potential(t, &spec, &ids, v)
            });
            let (gen_part, disc_part) = match &psi_cl {
                Some(psi) => otdisc_loss(
                    &mut tape,
                    state.variant,
                    x_real,
                    y_real,
                    &g_const,
                    &fwd_const,
                    &phi_pot,
                    Some(psi),
                )?,
                None => otdisc_loss(
                    &mut tape,
                    state.variant,
                    x_real,
                    y_real,
                    &g_const,
                    &fwd_const,
                    &phi_pot,
                    None,
                )?,
            };
            disc_value = tape.scalar_value(gen_part);
            let mut obj = disc_part;
            let mut gp_total = 0.0;
            if let LipschitzMode::GradientPenalty { eta } = state.lipschitz {
                let alphas: Vec<f64> = (0..n).map(|_| state.gp_rng.gen_range(0.0..1.0)).collect();
                let gp_phi =
                    gradient_penalty(&mut tape, &phi_pot, x_real, x_fake_c, eta, &alphas)?;
                gp_total += tape.scalar_value(gp_phi);
                obj = tape.add(obj, gp_phi);
                if let Some(psi) = &psi_cl {
                    let alphas2: Vec<f64> =
                        (0..n).map(|_| state.gp_rng.gen_range(0.0..1.0)).collect();
                    let gp_psi =
                        gradient_penalty(&mut tape, psi, y_real, y_synth_c, eta, &alphas2)?;
                    gp_total += tape.scalar_value(gp_psi);
                    obj = tape.add(obj, gp_psi);
                }
            }
            gp_value = gp_total;
            total = obj;
        }
    }

    let total_d = tape.scalar_value(total);
    if !total_d.is_finite() {
        return Err(Error::Numerical(format!(
            "critic loss became non-finite at step {}",
            state.step
        )));
    }

    // Gradients for the critic parameters only.
    let mut wrt = phi_ids.clone();
    if let Some((_, ids)) = &psi_data {
        wrt.extend_from_slice(ids);
    }
    let grads = tape.gradients(total, &wrt);
    let phi_n = phi_ids.len();
    {
        let comp = &mut state.components[phi_idx];
        comp.adam.apply(
            &mut comp.params,
            &grads[..phi_n],
            opt.lr,
            opt.beta1,
            opt.beta2,
        );
    }
    if let Some(i) = psi_idx {
        let comp = &mut state.components[i];
        comp.adam.apply(
            &mut comp.params,
            &grads[phi_n..],
            opt.lr,
            opt.beta1,
            opt.beta2,
        );
    }
    // Hard constraints are re-imposed after every update.
    if !matches!(state.lipschitz, LipschitzMode::GradientPenalty { .. })
        && state.variant != VariantId::StandardA
    {
        let mode = state.lipschitz;
        for name in state.critic_side() {
            let idx = state.component_index(name).unwrap();
            let spec = match state.components[idx].kind {
                ComponentKind::Discriminator { spec } => spec,
                _ => unreachable!(),
            };
            let catalog = discriminator_layer_catalog(&spec);
            enforce_lipschitz(&mut state.components[idx].params, &catalog, &mode);
        }
    }
    Ok(DiscStepInfo {
        disc: disc_value,
        gp: gp_value,
        total_d,
    })
}

/// One generator descent step; critics are frozen constants.
pub fn generator_step(
    state: &mut TrainState,
    opt: &OptimizerConfig,
    x_batch: &ArrayD<f64>,
    y_batch: &ArrayD<f64>,
) -> Result<GenStepInfo> {
    let (total_g, cycle_v, disc_v, grads_per_component) =
        generator_loss_and_grads(state, x_batch, y_batch)?;
    if !total_g.is_finite() {
        return Err(Error::Numerical(format!(
            "generator loss became non-finite at step {}",
            state.step
        )));
    }
    for (name, grads) in grads_per_component {
        let idx = state.component_index(&name).unwrap();
        let comp = &mut state.components[idx];
        let lr = if matches!(comp.kind, ComponentKind::Kernel { .. }) {
            opt.lr * opt.kernel_lr_mult
        } else {
            opt.lr
        };
        comp.adam
            .apply(&mut comp.params, &grads, lr, opt.beta1, opt.beta2);
    }
    Ok(GenStepInfo {
        cycle: cycle_v,
        disc: disc_v,
        total_g,
    })
}

type GenGrads = Vec<(String, Vec<ArrayD<f64>>)>;

/// Builds the generator objective `adv + gamma * cycle` and its gradients.
/// Exposed at crate level for the loss-composition tests.
pub(crate) fn generator_loss_and_grads(
    state: &TrainState,
    x_batch: &ArrayD<f64>,
    y_batch: &ArrayD<f64>,
) -> Result<(f64, f64, f64, GenGrads)> {
    let mut tape = Tape::new();
    let x = tape.constant(x_batch.clone());
    let y = tape.constant(y_batch.clone());

    let gen_names = state.generator_side();
    let mut leaves: Vec<(String, Vec<NodeId>)> = Vec::new();
    for name in &gen_names {
        let comp = state.component(name).unwrap();
        leaves.push((comp.name.clone(), comp.params.leaves(&mut tape)));
    }
    let leaf_of = |name: &str| -> Vec<NodeId> {
        leaves
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, ids)| ids.clone())
            .unwrap()
    };

    let g_spec = match state.component("g").unwrap().kind {
        ComponentKind::Generator { spec } => spec,
        _ => unreachable!(),
    };
    let g_ids = leaf_of("g");
    let g_map = move |t: &mut Tape, v: NodeId| generator_forward(t, &g_spec, &g_ids, v);

    let fwd_map: Box<dyn crate::losses::TapeMap> = match state.variant {
        VariantId::KnownC => {
            let op = state.known_op.clone().expect("known operator");
            Box::new(move |t: &mut Tape, v: NodeId| t.linear_op(v, op.clone(), false))
        }
        VariantId::LinearB => {
            let ids = leaf_of("kernel");
            let boundary = kernel_boundary(&state.component("kernel").unwrap().kind);
            Box::new(move |t: &mut Tape, v: NodeId| t.conv2d(v, ids[0], boundary))
        }
        VariantId::StandardA => {
            let spec = match state.component("f").unwrap().kind {
                ComponentKind::OperatorNet { spec } => spec,
                _ => unreachable!(),
            };
            let ids = leaf_of("f");
            Box::new(move |t: &mut Tape, v: NodeId| generator_forward(t, &spec, &ids, v))
        }
        VariantId::UnknownD => {
            let spec = match state.component("h").unwrap().kind {
                ComponentKind::OperatorNet { spec } => spec,
                _ => unreachable!(),
            };
            let ids = leaf_of("h");
            Box::new(move |t: &mut Tape, v: NodeId| generator_forward(t, &spec, &ids, v))
        }
    };

    // Critics enter as constants: the generator cannot move them.
    let phi_spec = match state.component("phi").unwrap().kind {
        ComponentKind::Discriminator { spec } => spec,
        _ => unreachable!(),
    };
    let phi_ids = state.component("phi").unwrap().params.constants(&mut tape);
    let phi_pot =
        move |t: &mut Tape, v: NodeId| discriminator_potential(t, &phi_spec, &phi_ids, v);
    let psi = state.component("psi").map(|c| {
        let spec = match c.kind {
            ComponentKind::Discriminator { spec } => spec,
            _ => unreachable!(),
        };
        (spec, c.params.clone())
    });

    let cycle = cycle_loss(&mut tape, x, y, &g_map, fwd_map.as_ref())?;
    let adv = match state.variant {
        VariantId::StandardA => {
            let (spec, params) = psi.as_ref().expect("psi");
            let spec = *spec;
            let ids = params.constants(&mut tape);
            let psi_pot =
                move |t: &mut Tape, v: NodeId| discriminator_potential(t, &spec, &ids, v);
            let (adv, _) = standard_cyclegan_losses(
                &mut tape, x, y, &g_map, fwd_map.as_ref(), &phi_pot, &psi_pot,
            )?;
            adv
        }
        _ => match psi.as_ref() {
            Some((spec, params)) => {
                let spec = *spec;
                let ids = params.constants(&mut tape);
                let psi_pot =
                    move |t: &mut Tape, v: NodeId| discriminator_potential(t, &spec, &ids, v);
                let (gen_part, _) = otdisc_loss(
                    &mut tape,
                    state.variant,
                    x,
                    y,
                    &g_map,
                    fwd_map.as_ref(),
                    &phi_pot,
                    Some(&psi_pot),
                )?;
                gen_part
            }
            None => {
                let (gen_part, _) = otdisc_loss(
                    &mut tape,
                    state.variant,
                    x,
                    y,
                    &g_map,
                    fwd_map.as_ref(),
                    &phi_pot,
                    None,
                )?;
                gen_part
            }
        },
    };
    let weighted_cycle = tape.mul_scalar(cycle, state.gamma);
    let total = tape.add(adv, weighted_cycle);

    let cycle_v = tape.scalar_value(cycle);
    let disc_v = tape.scalar_value(adv);
    let total_v = tape.scalar_value(total);

    let mut wrt = Vec::new();
    let mut spans = Vec::new();
    for (name, ids) in &leaves {
        spans.push((name.clone(), wrt.len(), ids.len()));
        wrt.extend_from_slice(ids);
    }
    let grads = tape.gradients(total, &wrt);
    let per_component = spans
        .into_iter()
        .map(|(name, at, len)| (name, grads[at..at + len].to_vec()))
        .collect();
    Ok((total_v, cycle_v, disc_v, per_component))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub cycle: f64,
    pub disc: f64,
    pub gp: f64,
    pub total_g: f64,
    pub total_d: f64,
}

/// Runs `epochs x (n_critic critic steps + 1 generator step per iteration)`.
/// Pools deliver unpaired batches through independent seeded iterators. The
/// epoch hook runs after each epoch (checkpointing lives there).
pub fn train(
    state: &mut TrainState,
    opt: &OptimizerConfig,
    x_pool: &ImagePool,
    y_pool: &ImagePool,
    train_seed: u64,
    mut on_epoch: impl FnMut(&TrainState, usize) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    opt.validate()?;
    if x_pool.len() < opt.batch_size || y_pool.len() < opt.batch_size {
        return Err(Error::Config(format!(
            "pools ({} / {}) shorter than one batch ({})",
            x_pool.len(),
            y_pool.len(),
            opt.batch_size
        )));
    }
    let mut x_iter = x_pool.batches(opt.batch_size, derive_seed(train_seed, "x-stream"));
    let mut y_iter = y_pool.batches(opt.batch_size, derive_seed(train_seed, "y-stream"));
    let iters_per_epoch = (x_pool.len() / opt.batch_size).max(1);
    let mut log = Vec::new();
    for epoch in 0..opt.epochs {
        state.epoch = epoch;
        for _ in 0..iters_per_epoch {
            let mut last_disc = DiscStepInfo {
                disc: 0.0,
                gp: 0.0,
                total_d: 0.0,
            };
            for _ in 0..opt.n_critic {
                let xb = x_iter.next_batch();
                let yb = y_iter.next_batch();
                last_disc = discriminator_step(state, opt, &xb, &yb)?;
            }
            let xb = x_iter.next_batch();
            let yb = y_iter.next_batch();
            let gen = generator_step(state, opt, &xb, &yb)?;
            state.step += 1;
            let record = LossRecord {
                step: state.step,
                cycle: gen.cycle,
                disc: gen.disc,
                gp: last_disc.gp,
                total_g: gen.total_g,
                total_d: last_disc.total_d,
            };
            LossBundle::new(record.cycle, record.disc, record.gp, state.gamma, 0.0)?;
            log.push(record);
        }
        on_epoch(state, epoch)?;
    }
    Ok(log)
}

/// Checkpoint manifest: component index plus run identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub variant: VariantId,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub components: Vec<ComponentEntry>,
    pub known_op: Option<KnownOpMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub name: String,
    pub kind: ComponentKind,
    pub file: String,
    pub param_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum KnownOpMeta {
    FourierSubsample { mask_file: String },
    ExplicitMatrix { matrix_file: String },
}

/// One tensor file per component plus a manifest.
pub fn save_checkpoint(
    dir: &Path,
    state: &TrainState,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for comp in &state.components {
        let file = format!("{}.otn", comp.name);
        let flat = comp.params.flatten();
        let arr = ArrayD::from_shape_vec(IxDyn(&[flat.len()]), flat).expect("flat");
        io::write_tensor(&dir.join(&file), &arr, io::Dtype::F64)?;
        entries.push(ComponentEntry {
            name: comp.name.clone(),
            kind: comp.kind.clone(),
            file,
            param_count: comp.params.param_count(),
        });
    }
    let known_op = match state.known_op.as_deref() {
        Some(KnownLinearOperator::FourierSubsample { mask }) => {
            let arr = mask.mapv(|b| if b { 1.0 } else { 0.0 }).into_dyn();
            io::write_tensor(&dir.join("mask.otn"), &arr, io::Dtype::F64)?;
            Some(KnownOpMeta::FourierSubsample {
                mask_file: "mask.otn".into(),
            })
        }
        Some(KnownLinearOperator::ExplicitMatrix { matrix }) => {
            io::write_tensor(
                &dir.join("matrix.otn"),
                &matrix.clone().into_dyn(),
                io::Dtype::F64,
            )?;
            Some(KnownOpMeta::ExplicitMatrix {
                matrix_file: "matrix.otn".into(),
            })
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        variant: state.variant,
        step: state.step,
        seed,
        config_hash: config_hash.into(),
        components: entries,
        known_op,
    };
    io::write_sidecar(&dir.join("manifest.toml"), &manifest)
}

/// Loaded checkpoint: enough to evaluate (optimizer moments are not
/// persisted; checkpoints are inference artifacts).
pub struct CheckpointBundle {
    pub manifest: CheckpointManifest,
    pub components: Vec<(String, ComponentKind, ParamSet)>,
    pub known_op: Option<KnownLinearOperator>,
}

impl CheckpointBundle {
    pub fn component(&self, name: &str) -> Option<&(String, ComponentKind, ParamSet)> {
        self.components.iter().find(|(n, _, _)| n == name)
    }

    /// Generator output for a measurement batch.
    pub fn reconstruct(&self, y: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let (_, kind, params) = self
            .component("g")
            .ok_or_else(|| Error::Config("checkpoint has no generator".into()))?;
        let ComponentKind::Generator { spec } = kind else {
            return Err(Error::Config("component g is not a generator".into()));
        };
        let batch = y
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Dimension("expected [n, c, h, w]".into()))?;
        Ok(generator_apply(spec, params, batch)?.into_dyn())
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointBundle> {
    let manifest: CheckpointManifest = io::read_sidecar(&dir.join("manifest.toml"))?;
    let mut components = Vec::new();
    for entry in &manifest.components {
        let arr = io::read_tensor(&dir.join(&entry.file))?;
        let flat: Vec<f64> = arr.iter().copied().collect();
        let mut params = template_params(&entry.kind);
        params.unflatten(&flat)?;
        components.push((entry.name.clone(), entry.kind.clone(), params));
    }
    let known_op = match &manifest.known_op {
        Some(KnownOpMeta::FourierSubsample { mask_file }) => {
            let arr = io::read_tensor(&dir.join(mask_file))?;
            let m2 = arr
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| Error::Serialization("mask must be rank 2".into()))?;
            Some(KnownLinearOperator::FourierSubsample {
                mask: m2.mapv(|v| v != 0.0),
            })
        }
        Some(KnownOpMeta::ExplicitMatrix { matrix_file }) => {
            let arr = io::read_tensor(&dir.join(matrix_file))?;
            let m2 = arr
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| Error::Serialization("matrix must be rank 2".into()))?;
            Some(KnownLinearOperator::ExplicitMatrix { matrix: m2 })
        }
        None => None,
    };
    Ok(CheckpointBundle {
        manifest,
        components,
        known_op,
    })
}

/// Parameter layout with the right shapes for a component kind, ready for
/// `unflatten`.
fn template_params(kind: &ComponentKind) -> ParamSet {
    match kind {
        ComponentKind::Generator { spec } | ComponentKind::OperatorNet { spec } => {
            init_generator(spec, 0)
        }
        ComponentKind::Discriminator { spec } => init_discriminator(spec, 0),
        ComponentKind::Kernel { size, boundary } => {
            let delta = LearnableConvKernel::delta(*size, *boundary);
            let mut params = ParamSet::default();
            params.push(
                "kernel.weight",
                delta
                    .kernel()
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, 1, *size, *size]))
                    .expect("kernel shape"),
            );
            params
        }
    }
}
