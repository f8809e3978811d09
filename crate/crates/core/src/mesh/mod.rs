//! Nodes exchanging topic messages and service calls, in process or over
//! TCP.

pub mod bus;
pub mod latency;
pub mod pipeline;
pub mod tcp;
pub mod wire;

use thiserror::Error;

pub use bus::{Bus, Publisher, ServiceHandle, Subscription};
pub use latency::{Clock, LatencyReport, LatencyRow, Stage};
pub use pipeline::{run_pipeline, FrameTruth, PipelineConfig, PipelineOutput, Topology};
pub use wire::{Body, Header, ImageBody, Kind, LampFix, Message, PositionBody, WireError};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("service {0:?} is not registered")]
    UnknownService(String),
    #[error("timed out")]
    Timeout,
    #[error("channel closed by the peer")]
    Closed,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("latency report: {0}")]
    Report(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Track(#[from] crate::tracker::TrackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
