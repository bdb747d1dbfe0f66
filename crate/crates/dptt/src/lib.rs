//! Differentially private training for tabular transformers.
//!
//! `dptt` implements an end-to-end pipeline for training a tabular
//! transformer under differential privacy and then adapting it to a
//! downstream dataset with parameter-efficient fine-tuning (PEFT):
//!
//! 1. pretrain the full model with DP-SGD on an upstream dataset,
//! 2. freeze the backbone,
//! 3. attach a small trainable surface (LoRA, bottleneck adapters, or
//!    unit-level tuning of the MLP) and fine-tune it with DP-SGD on the
//!    downstream dataset,
//! 4. account the privacy spend of both phases separately with a Rényi
//!    DP accountant.
//!
//! The numeric core is a small dense-tensor engine with reverse-mode
//! differentiation and per-example gradient extraction, which is what
//! DP-SGD's per-example clipping requires. Everything is deterministic
//! given seeds: initialization, batch order, and the Gaussian noise
//! stream are all counter-based, so a training run is bit-reproducible
//! regardless of thread count.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `dptt` binary for the batch-experiment CLI.

pub mod accountant;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dp;
pub mod experiment;
pub mod model;
pub mod peft;
pub mod rng;
pub mod tensor;

pub use accountant::{calibrate_sigma, PhaseLedger, PrivacyLedger, RdpCurve};
pub use autodiff::{GradMap, Tape, ValueId};
pub use data::{DatasetSchema, TabularDataset};
pub use dp::{DpConfig, GradientSample};
pub use model::{Model, ModelConfig, Parameter};
pub use peft::{PeftConfig, PeftVariant};
pub use tensor::Tensor;
