//! Diversity-regularized spatiotemporal attention for video re-identification.
//!
//! The crate takes per-frame backbone feature grids as input and implements
//! everything trained on top of them:
//!
//! - [`sampling`]: restricted random sampling of N frames per video.
//! - [`spatial`]: K spatial attention heads, Hellinger diversity penalty `Q` and
//!   the `Q′` variant.
//! - [`enhancement`]: per-head temporal pooling of gated features.
//! - [`temporal`]: per-head temporal attention and the L2-normalised embedding.
//! - [`oim`]: lookup-table identity loss.
//! - [`pipeline`]: composed forward pass and hand-written backward pass.
//! - [`gradcheck`]: central-difference verification of the backward pass.
//! - [`train`], [`synth`], [`eval`]: SGD training on synthetic data and
//!   CMC/mAP retrieval metrics.
//! - [`config`], [`checkpoint`], [`gridfile`]: text config and binary file formats.
//!
//! All arithmetic is `f64`; all randomness flows from [`rng::Rng`].

pub mod checkpoint;
pub mod config;
pub mod enhancement;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gridfile;
pub mod math;
pub mod model;
pub mod oim;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
pub use math::Mat;
pub use model::{GradientBundle, Hyperparams, ModelParams};
pub use oim::OimState;
