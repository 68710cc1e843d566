//! Low-rank adapters with a learned transform between the two factors.
//!
//! An adapter on a frozen weight `W` (shape `d × k`) adds
//! `ΔW = (alpha / r) · B · M · A`, where `A` is `r × k`, `B` is `d × r`
//! and the `r × r` transform `M` depends on the [`AdapterVariant`]:
//!
//! | variant | `M`       |
//! |---------|-----------|
//! | LORA    | `I`       |
//! | SHIM    | `C`       |
//! | ICFM    | `C · Cᵀ`  |
//! | CTCM    | `C · D`   |
//! | DTSM    | `C + D`   |
//!
//! `B` starts at zero, so an adapted model initially computes exactly what
//! the base model does.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod linalg;
pub mod merged_qkv;
pub mod model;
pub mod report;
pub mod tasks;
pub mod train;

pub use adapter::{AdapterConfig, AdapterParams, AdapterVariant};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
pub use merged_qkv::{Channel, MergedAdapterParams};
pub use model::{Model, ModelSpec, Placement, Site, Weight};
