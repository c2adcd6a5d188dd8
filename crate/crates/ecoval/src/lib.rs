//! Cluster-propagated data valuation for classification datasets.
//!
//! The library values every training point by (1) clustering the embedding
//! space with a Gaussian mixture, (2) measuring each cluster's leave-cluster-
//! out contribution to test utility, and (3) splitting that contribution among
//! members through two normalized adjustment factors — one driven by a cheap
//! Shapley-value surrogate, one by distance to the cluster centroid. Classic
//! baselines (leave-one-out, exact Shapley, truncated Monte Carlo Shapley) and
//! an evaluation harness (addition/removal curves, cost accounting, rank
//! agreement) ship alongside.

pub mod bench;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod pipeline;
pub mod shapley;
pub mod utility;
