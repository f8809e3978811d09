use std::fmt::Write as _;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::MeshError;

/// Monotonic nanoseconds since pipeline start, shared by every node.
#[derive(Debug, Clone, Copy)]
pub struct Clock(Instant);

impl Clock {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn now(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Frame conversion and serialization before it leaves the camera node.
    CapturePublish,
    /// From leaving the camera node until the tracker holds the frame.
    Transport,
    Track,
    /// Time spent in ID recognition calls for the frame.
    Id,
    /// Locator call, including publishing the position.
    Solve,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::CapturePublish, Stage::Transport, Stage::Track, Stage::Id, Stage::Solve, Stage::Total];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::CapturePublish => "capture_publish",
            Stage::Transport => "transport",
            Stage::Track => "track",
            Stage::Id => "id",
            Stage::Solve => "solve",
            Stage::Total => "total",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub fix_seq: u32,
    pub stage: Stage,
    pub ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn push(&mut self, fix_seq: u32, stage: Stage, ns: u64) {
        self.rows.push(LatencyRow { fix_seq, stage, ns });
    }

    pub fn samples(&self, stage: Stage) -> impl Iterator<Item = u64> + '_ {
        self.rows.iter().filter(move |r| r.stage == stage).map(|r| r.ns)
    }

    /// Mean duration of `stage` in seconds.
    pub fn mean_s(&self, stage: Stage) -> Option<f64> {
        let (n, sum) = self.samples(stage).fold((0u64, 0u128), |(n, s), v| (n + 1, s + v as u128));
        (n > 0).then(|| sum as f64 / n as f64 * 1e-9)
    }

    pub fn fixes(&self) -> usize {
        self.samples(Stage::Total).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MeshError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| MeshError::Report(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, MeshError> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd
            .deserialize()
            .collect::<Result<Vec<LatencyRow>, _>>()
            .map_err(|e| MeshError::Report(e.to_string()))?;
        Ok(Self { rows })
    }

    /// Mean per stage, one line each, in milliseconds.
    pub fn breakdown(&self) -> String {
        let mut s = String::new();
        for stage in Stage::ALL {
            if let Some(m) = self.mean_s(stage) {
                let _ = writeln!(s, "  {:<16} {:>10.3} ms", stage.as_str(), m * 1e3);
            }
        }
        s
    }
}
