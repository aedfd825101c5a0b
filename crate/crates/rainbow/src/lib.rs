//! Benchmark engine for class-incremental continual learning with a bounded
//! replay memory.
//!
//! The pipeline: a labelled dataset (MNIST IDX files or synthetic Gaussian
//! blobs) is split into a sequence of tasks, either disjoint by class or
//! "blurry" (every task holds a majority of its own classes plus a trickle of
//! all the others). A from-scratch MLP trains on the stream while an episodic
//! memory retains a capped exemplar set, refreshed at task boundaries by one
//! of several selection strategies — the headline one keeps, per class, an
//! evenly spaced spectrum of samples ranked by how unstable their predictions
//! are under random input perturbations. Accuracy, forgetting, and
//! intransigence are reported against a jointly trained reference.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stream;
pub mod uncertainty;

pub use error::{Error, Result};
