//! Experiment runner and error statistics.

pub mod experiment;
pub mod report;
pub mod stats;

use thiserror::Error;

use crate::codec::{extract_features_at, match_id, LuminaireDatabase, ThresholdPolicy};
use crate::geometry::{locate_with, select_lamp_pair, CameraIntrinsics, GeometryError, LocateOptions, ObservedLamp};
use crate::mesh::MeshError;
use crate::tracker::{detect_blobs, TrackerConfig};
use crate::types::Frame;
use crate::PoseFix;

pub use experiment::{run_experiment, ExperimentOutcome, ExperimentSpec, Mode, RenderPreset};
pub use stats::{error_distribution, ErrorStats, Sample, StatsError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("experiment produced no fixes ({0} runs failed)")]
    NoFixes(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Identifies every lamp in a single frame and solves the pose from the best
/// pair, without tracking or transport.
pub fn locate_frame(
    frame: &Frame,
    db: &LuminaireDatabase,
    intr: &CameraIntrinsics,
    cfg: &TrackerConfig,
    opts: LocateOptions,
) -> Result<PoseFix, GeometryError> {
    let lamps: Vec<ObservedLamp> = detect_blobs(frame, cfg)
        .into_iter()
        .filter_map(|b| {
            let f = extract_features_at(frame, 0, &b.window, db.timing(), ThresholdPolicy::Otsu).ok()?;
            let id = match_id(&f, db).ok()?;
            Some(ObservedLamp::new(id.clone(), db.get(&id)?.position, b.center))
        })
        .collect();
    let (a, b) = select_lamp_pair(&lamps)?;
    let mut fix = locate_with(a, b, intr, opts)?;
    fix.timestamp_ns = frame.timestamp_ns;
    Ok(fix)
}
