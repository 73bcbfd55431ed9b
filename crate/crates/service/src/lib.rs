//! Runtime side of the pipeline: the recommendation service, its HTTP API,
//! and the `prescribe` command line.

pub mod api;
pub mod cli;
pub mod recommender;
