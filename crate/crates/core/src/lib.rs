//! Spectral label trees for extreme multiclass and multilabel classification.
//!
//! A [`tree::LabelTree`] maps an example to a small candidate label set by
//! routing it through linear splits, each found by solving a
//! balance-constrained eigenvalue problem over the labels that reach the node.
//! A [`classifier::ClassifierModel`] then scores only the candidates, so
//! inference cost depends on the tree depth and the leaf budget, not on the
//! total number of labels.
//!
//! Pipeline:
//!
//! 1. load or generate a [`data::Dataset`]
//! 2. [`tree::build_tree`] learns the routers and leaf candidate sets
//! 3. [`classifier::train`] fits the restricted classifier with sampled routing
//! 4. [`classifier::ClassifierModel::predict`] / [`metrics::evaluate`] route deterministically
//!
//! Data-parallel loops go through [`exec`]; with the `parallel` feature off
//! (or inside [`exec::sequential`]) everything runs on the calling thread and
//! produces bitwise-identical results.

pub mod classifier;
mod codec;
pub mod data;
pub mod error;
pub mod exec;
pub mod hashing;
pub mod metrics;
pub mod sparse;
pub mod spectral;
pub mod tree;

pub use error::{Error, Result};
