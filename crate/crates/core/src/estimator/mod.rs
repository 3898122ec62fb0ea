//! Client-to-client latency estimation from server-side minimum OWDs.

pub mod complete;
pub mod evaluate;
pub mod geo;
pub mod io;
pub mod matrix;

use thiserror::Error;

pub use complete::{completion_methods, Completion, CompletionConfig, CompletionMethod};
pub use evaluate::{disc_geolocate, holdout_evaluate, GeoEstimate, HoldoutReport, Located};
pub use geo::{geo_latency, vincenty_distance, GeoCoordinate};
pub use matrix::{assemble_x, build_a, AssembleConfig, LatencyMatrix, RegressionCoeffs, ServerMeta, Symmetrize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("vincenty iteration did not converge")]
    NoConvergence,
    #[error("no client reaches the minimum server count")]
    NoEligibleClients,
    #[error("node {0} has no observed entry in its row or column")]
    MaskDegenerate(String),
    #[error("completion produced non-finite values")]
    NonFinite,
    #[error("closed form needs complete server blocks: {0}")]
    IncompleteBlock(String),
    #[error("every holdout sample left a degenerate mask ({0} attempts)")]
    DegenerateAfterHoldout(u64),
    #[error("{0}")]
    InvalidInput(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for EstimatorError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
