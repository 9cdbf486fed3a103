//! Clustering of locations by the dependence structure between two
//! co-evolving daily series (a mobility index and new case counts).
//!
//! Each city becomes a cloud of rank-normalized points in the unit cube;
//! cities are compared with Wasserstein distances, grouped by Ward
//! agglomeration, summarized by fixed-support barycenters, and the clusters
//! are explained with static covariates.

pub mod barycenter;
pub mod data;
pub mod error;
pub mod features;
pub mod forest;
pub mod hierarchy;
mod parallel;
pub mod pipeline;
pub mod preprocess;
pub mod shapley;
pub mod spatial;
pub mod synthetic;
pub mod transport;

pub use error::{Error, Result};
pub use parallel::with_threads;
