//! Unsupervised local-discriminative representation learning for images,
//! with prior-guided structure clustering and a synthetic-data harness.
//!
//! The crate trains a U-Net style backbone with two pixel-wise heads (an
//! embedding head and a clustering head) in three unsupervised stages:
//! patch discrimination with mixup, local discrimination, and adversarial
//! prior-guided clustering. A small segmentation decoder supports transfer
//! evaluation on labeled data.

pub mod autodiff;
pub mod core_math;
pub mod data_pipeline;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod training;

pub use error::{Error, Result};
