//! Iterative probability estimation for multi-view stereo.
//!
//! A reference image and its source views go through a shared feature
//! pyramid ([`features`]), are plane-swept and correlated into per-pixel
//! similarity volumes ([`matching`]), and a convolutional GRU refines a
//! hidden state that is decoded into a depth probability volume at every
//! iteration ([`estimator`]). The final 1/4-resolution depth is upsampled
//! with learned convex weights ([`upsample`]). [`train`] optimizes the
//! whole model end to end on [`synth`] scenes, and [`fusion`] filters and
//! merges per-view depth maps into a point cloud scored by [`eval`].
//!
//! Data-parallel stages take an [`Exec`](itermvs_tensor::Exec); results
//! are bitwise identical in sequential and parallel mode.

pub mod error;
pub mod features;
pub mod geometry;
pub mod nn;
pub mod ops;
pub mod matching;
pub mod config;
pub mod estimator;
pub mod upsample;
pub mod model;
pub mod loss;
pub mod io;
pub mod ply;
pub mod scene;
pub mod synth;
pub mod fusion;
pub mod eval;
pub mod train;
pub mod pipeline;
pub mod gradsuite;
