//! Unpaired inverse-problem reconstruction with optimal-transport-driven
//! cycle-consistent adversarial training.
//!
//! The crate has three layers:
//!
//! - an exact layer: forward measurement operators ([`physics`]) and a
//!   discrete optimal-transport oracle ([`ot`]) that certifies the transport
//!   bounds the training objectives rest on;
//! - a learning layer: an autodiff tape ([`tape`]), networks ([`models`]),
//!   the objective family ([`losses`]), and the alternating trainer
//!   ([`trainer`]);
//! - an experiment layer: synthetic datasets ([`data`]), evaluation metrics
//!   ([`metrics`]), configuration ([`config`]), orchestration
//!   ([`experiment`]), plots ([`plot`]), and tensor-container file IO
//!   ([`io`]).

pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod lp;
pub mod metrics;
pub mod models;
pub mod ot;
pub mod physics;
pub mod plot;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
