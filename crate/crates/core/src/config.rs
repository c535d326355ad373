//! Experiment configuration: a strict TOML schema, cross-field validation
//! with explicit error paths, a content hash that names the run, and the
//! seed hierarchy every component draws from.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::Boundary;
use crate::data::{derive_seed, NoiseModel, NormalizationKind, SceneKind, SceneSpec};
use crate::error::{Error, Result};
use crate::losses::VariantId;
use crate::models::{
    DiscHead, DiscStyle, DiscriminatorSpec, GeneratorSpec, LipschitzMode, NormKind,
};
use crate::physics::{make_mask, KnownLinearOperator, LearnableConvKernel, MaskPattern, MaskSpec};
use crate::trainer::{ModelConfig, OptimizerConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// One of `a`, `b`, `c`, `d`.
    pub variant: String,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every_epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: SceneKind,
    pub size: usize,
    pub count: usize,
    pub test_count: usize,
    pub channels: usize,
    pub noise: NoiseModel,
    #[serde(default = "default_normalization")]
    pub normalization: NormalizationKind,
    #[serde(default = "default_sources")]
    pub sources: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Quadruple the training pool with horizontal/vertical flips.
    #[serde(default)]
    pub augment: bool,
}

fn default_normalization() -> NormalizationKind {
    NormalizationKind::None
}
fn default_sources() -> usize {
    12
}
fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum ForwardSection {
    /// Known k-space line subsampling (variant c).
    FourierSubsample {
        acceleration: usize,
        acs_fraction: f64,
        #[serde(default = "default_pattern")]
        pattern: MaskPattern,
    },
    /// True blur kernel used to synthesize measurements (variant b).
    ConvKernel {
        size: usize,
        sigma: f64,
        #[serde(default = "default_boundary")]
        boundary: Boundary,
    },
    /// Measurements are the scenes plus noise (variants a, d).
    Identity,
}

fn default_pattern() -> MaskPattern {
    MaskPattern::UniformRandomLines
}
fn default_boundary() -> Boundary {
    Boundary::Periodic
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub depth: usize,
    pub base_channels: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
}

fn default_norm() -> NormKind {
    NormKind::Instance
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSection {
    pub style: DiscStyle,
    pub blocks: usize,
    pub head: DiscHead,
    pub base_channels: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub lipschitz: LipschitzMode,
}

fn default_gamma() -> f64 {
    10.0
}

/// Kernel size of the learnable blur generator (variant b).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub size: usize,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            size: 10,
            boundary: Boundary::Periodic,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    pub forward: ForwardSection,
    pub generator: GeneratorSection,
    pub discriminator: DiscriminatorSection,
    /// Second deep generator (variants a and d); defaults to `generator`.
    #[serde(default)]
    pub operator_net: Option<GeneratorSection>,
    #[serde(default)]
    pub kernel: Option<KernelSection>,
    pub optimizer: OptimizerConfig,
    pub loss: LossSection,
}

/// Labeled sub-seeds of one master seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedHierarchy {
    pub master: u64,
    pub data: u64,
    pub test_data: u64,
    pub init: u64,
    pub training: u64,
    pub gp: u64,
    pub mask: u64,
    pub pool_x: u64,
    pub pool_y: u64,
}

impl SeedHierarchy {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            data: derive_seed(master, "data"),
            test_data: derive_seed(master, "data-test"),
            init: derive_seed(master, "init"),
            training: derive_seed(master, "training"),
            gp: derive_seed(master, "gp-interpolation"),
            mask: derive_seed(master, "mask"),
            pool_x: derive_seed(master, "pool-x"),
            pool_y: derive_seed(master, "pool-y"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn variant(&self) -> Result<VariantId> {
        match self.experiment.variant.as_str() {
            "a" | "standard_a" => Ok(VariantId::StandardA),
            "b" | "linear_b" => Ok(VariantId::LinearB),
            "c" | "known_c" => Ok(VariantId::KnownC),
            "d" | "unknown_d" => Ok(VariantId::UnknownD),
            other => Err(Error::Config(format!(
                "experiment.variant: unknown variant '{other}' (expected a, b, c, or d)"
            ))),
        }
    }

    /// All cross-field rules, checked before any compute.
    pub fn validate(&self) -> Result<()> {
        let variant = self.variant()?;
        if self.dataset.size == 0 || self.dataset.count == 0 {
            return Err(Error::Config("dataset: size and count must be positive".into()));
        }
        if self.dataset.channels == 0 {
            return Err(Error::Config("dataset.channels must be positive".into()));
        }
        match (variant, &self.forward) {
            (VariantId::KnownC, ForwardSection::FourierSubsample { acceleration, acs_fraction, .. }) => {
                MaskSpec {
                    acceleration: *acceleration,
                    acs_fraction: *acs_fraction,
                    pattern: MaskPattern::UniformRandomLines,
                }
                .validate()?;
                if self.dataset.channels != 2 {
                    return Err(Error::Config(
                        "forward.kind = fourier-subsample carries (real, imaginary) data; dataset.channels must be 2".into(),
                    ));
                }
            }
            (VariantId::KnownC, other) => {
                return Err(Error::Config(format!(
                    "variant c needs a known forward operator (fourier-subsample), got {other:?}"
                )))
            }
            (VariantId::LinearB, ForwardSection::ConvKernel { size, sigma, .. }) => {
                if *size == 0 || *sigma <= 0.0 {
                    return Err(Error::Config(
                        "forward.conv-kernel: size and sigma must be positive".into(),
                    ));
                }
                if self.dataset.channels != 1 {
                    return Err(Error::Config(
                        "the blur-kernel variant operates on single-channel images".into(),
                    ));
                }
            }
            (VariantId::LinearB, other) => {
                return Err(Error::Config(format!(
                    "variant b learns a blur kernel; the forward spec must be conv-kernel, got {other:?}"
                )))
            }
            (VariantId::StandardA | VariantId::UnknownD, ForwardSection::FourierSubsample { .. }) => {
                return Err(Error::Config(
                    "variants a and d treat the forward operator as unknown; use identity or conv-kernel data synthesis".into(),
                ))
            }
            _ => {}
        }
        let want_sigmoid = variant == VariantId::StandardA;
        if (self.discriminator.head == DiscHead::Sigmoid) != want_sigmoid {
            return Err(Error::Config(format!(
                "discriminator.head: variant {} requires {}",
                variant.letter(),
                if want_sigmoid { "sigmoid" } else { "linear" }
            )));
        }
        if matches!(self.loss.lipschitz, LipschitzMode::SpectralNorm { .. })
            && self.discriminator.norm != NormKind::None
        {
            return Err(Error::Config(
                "discriminator.norm must be 'none' under spectral normalization".into(),
            ));
        }
        let div = 1usize << self.generator.depth;
        if self.dataset.size % div != 0 {
            return Err(Error::Config(format!(
                "generator.depth = {} needs image sizes divisible by {div}; dataset.size = {}",
                self.generator.depth, self.dataset.size
            )));
        }
        if self.dataset.size >> self.discriminator.blocks == 0 {
            return Err(Error::Config(format!(
                "discriminator.blocks = {} exhausts {}-pixel images",
                self.discriminator.blocks, self.dataset.size
            )));
        }
        self.optimizer.validate()?;
        if self.dataset.count < self.optimizer.batch_size {
            return Err(Error::Config(format!(
                "dataset.count = {} is shorter than one batch ({})",
                self.dataset.count, self.optimizer.batch_size
            )));
        }
        if let LipschitzMode::GradientPenalty { eta } = self.loss.lipschitz {
            if eta < 0.0 {
                return Err(Error::Config("loss.lipschitz.eta must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialized form; names the run.
    pub fn content_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        hex_string(&digest)
    }

    pub fn seeds(&self) -> SeedHierarchy {
        SeedHierarchy::new(self.experiment.seed)
    }

    pub fn scene_spec(&self, count: usize) -> SceneSpec {
        SceneSpec {
            kind: self.dataset.kind,
            size: self.dataset.size,
            count,
            channels: self.dataset.channels,
            noise: self.dataset.noise,
            sources: self.dataset.sources,
            amplitude: self.dataset.amplitude,
        }
    }

    /// Measurement operator used to synthesize data (the *true* physics).
    pub fn data_forward_operator(
        &self,
        seeds: &SeedHierarchy,
    ) -> Result<Option<crate::models::ForwardOperator>> {
        match &self.forward {
            ForwardSection::Identity => Ok(None),
            ForwardSection::ConvKernel {
                size,
                sigma,
                boundary,
            } => Ok(Some(crate::models::ForwardOperator::Kernel(
                LearnableConvKernel::gaussian(*size, *sigma, *boundary),
            ))),
            ForwardSection::FourierSubsample {
                acceleration,
                acs_fraction,
                pattern,
            } => {
                let spec = MaskSpec {
                    acceleration: *acceleration,
                    acs_fraction: *acs_fraction,
                    pattern: *pattern,
                };
                let mask = make_mask(
                    &spec,
                    (self.dataset.size, self.dataset.size),
                    seeds.mask,
                )?;
                Ok(Some(crate::models::ForwardOperator::Known(
                    KnownLinearOperator::FourierSubsample { mask },
                )))
            }
        }
    }

    /// The known operator handed to the trainer (variant c only).
    pub fn known_operator(&self, seeds: &SeedHierarchy) -> Result<Option<KnownLinearOperator>> {
        if self.variant()? != VariantId::KnownC {
            return Ok(None);
        }
        match self.data_forward_operator(seeds)? {
            Some(crate::models::ForwardOperator::Known(op)) => Ok(Some(op)),
            _ => Err(Error::Config(
                "variant c requires the fourier-subsample forward spec".into(),
            )),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let generator = GeneratorSpec {
            depth: self.generator.depth,
            base_channels: self.generator.base_channels,
            norm: self.generator.norm,
            in_channels: self.dataset.channels,
            out_channels: self.dataset.channels,
        };
        let opn = self.operator_net.unwrap_or(self.generator);
        let operator_net = GeneratorSpec {
            depth: opn.depth,
            base_channels: opn.base_channels,
            norm: opn.norm,
            in_channels: self.dataset.channels,
            out_channels: self.dataset.channels,
        };
        let discriminator = DiscriminatorSpec {
            style: self.discriminator.style,
            blocks: self.discriminator.blocks,
            head: self.discriminator.head,
            base_channels: self.discriminator.base_channels,
            norm: self.discriminator.norm,
            in_channels: self.dataset.channels,
            input_hw: (self.dataset.size, self.dataset.size),
        };
        let kernel = self.kernel.unwrap_or_default();
        ModelConfig {
            generator,
            discriminator,
            operator_net,
            kernel_size: kernel.size,
            kernel_boundary: kernel.boundary,
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
