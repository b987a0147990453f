//! Long-tailed class-incremental learning with task-aware expansion.
//!
//! Each new task trains only the most gradient-sensitive fraction of the
//! feature extractor (plus the classifier head) and freezes the rest. Training
//! combines effective-number reweighted cross-entropy with two centroid losses
//! that pull features toward their class centroid and push centroids apart.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), MLP and small conv backbones ([`models`]), a long-tail task
//! protocol with herding memory ([`data`]), the sensitivity ranking
//! ([`sensitivity`]), losses ([`centroid`], [`rebalance`]), the per-task loop
//! ([`trainer`]), and an experiment runner ([`experiment`]).

pub mod autodiff;
mod binio;
pub mod centroid;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod plot;
pub mod rebalance;
pub mod sensitivity;
pub mod trainer;

pub use error::{Error, Result};
