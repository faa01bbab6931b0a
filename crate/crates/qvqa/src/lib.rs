//! Multi-view ultrasound vision-language pre-training at desk scale: a
//! synthetic two-view scene generator with templated reports and
//! multi-granularity QA, a from-scratch tape autodiff engine, transformer
//! encoders with a query-transformer bottleneck, buffered contrastive
//! objectives, a prefix-conditioned text generator, and the training /
//! evaluation / verification harnesses behind the `qvqa` binary.

pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod qft;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
