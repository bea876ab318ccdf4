//! Domain-adaptive panoptic segmentation on a procedural toy benchmark.
//!
//! The crate bundles everything needed to study unsupervised domain
//! adaptation for panoptic segmentation at desk scale: a synthetic
//! source/target dataset generator, four panoptic network topologies built
//! on a small hierarchical transformer encoder, a mean-teacher self-training
//! engine with ClassMix, rare-class sampling and feature-distance
//! regularization, deterministic panoptic fusion, and the PQ/SQ/RQ metric
//! family with mIoU and mask mAP.
//!
//! Start with the `examples/` directory: each example is a runnable
//! walkthrough of one capability (data generation, training, evaluation,
//! the topology study, the UDA ablation, plotting). The `panuda` binary
//! exposes the same capabilities as subcommands.

pub mod core;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod real;
pub mod tensor;
pub mod toydata;
pub mod uda;

pub use crate::core::{ClassTable, Dataset, InstancePrediction, PanopticLabel, Sample, VOID_CLASS};
pub use crate::real::Real;
