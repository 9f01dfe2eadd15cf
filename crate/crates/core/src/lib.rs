//! Self-supervised Conformer speech representations for paralinguistic tasks.
//!
//! The crate covers the whole workbench: a log-mel [`frontend`], the strided
//! convolutional feature encoder ([`featenc`]), the [`conformer`] stack,
//! masked contrastive [`pretrain`]ing, per-layer embedding [`extract`]ion,
//! linear [`probe`]s with task metrics, layer [`analysis`] (CKA, attention
//! distance), and the [`pipeline`] that ties the stages together.

pub mod error;
pub mod frontend;
pub mod io;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod real;

pub mod analysis;
pub mod conformer;
pub mod extract;
pub mod featenc;
pub mod model;
pub mod pretrain;
pub mod probe;

pub use error::{Error, Result};
pub use real::Real;
