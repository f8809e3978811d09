//! Experiment definitions and the runner.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::stats::{error_distribution, Axis, ErrorStats, Sample};
use super::HarnessError;
use crate::geometry::{calibrate_center, CameraIntrinsics};
use crate::mesh::latency::LatencyReport;
use crate::mesh::pipeline::{run_pipeline, PipelineConfig, PipelineOutput, Topology};
use crate::mesh::wire::PositionBody;
use crate::simulator::{RenderConfig, ScenePlatform, Trajectory};
use crate::PoseFix;

pub const SPEC_VERSION: u32 = 1;

/// Grid coordinates: six evenly spaced cells across the 100 cm platform.
pub const GRID_COORDS: [f64; 6] = [-41.67, -25.0, -8.33, 8.33, 25.0, 41.67];
pub const GRID_REPETITIONS: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Repeated fixes at one position with random headings.
    Static,
    /// Repeated fixes over a set of points.
    Grid,
    /// Straight-line runs through the node pipeline.
    Dynamic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Static => "static",
            Mode::Grid => "grid",
            Mode::Dynamic => "dynamic",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderPreset {
    Native,
    #[default]
    Compressed,
}

impl RenderPreset {
    pub fn render(self) -> RenderConfig {
        match self {
            RenderPreset::Native => RenderConfig::native(),
            RenderPreset::Compressed => RenderConfig::compressed(),
        }
    }
}

impl FromStr for RenderPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(RenderPreset::Native),
            "compressed" => Ok(RenderPreset::Compressed),
            other => Err(format!("unknown render preset {other:?} (expected native or compressed)")),
        }
    }
}

impl fmt::Display for RenderPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RenderPreset::Native => "native",
            RenderPreset::Compressed => "compressed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub from: (f64, f64),
    pub to: (f64, f64),
    #[serde(default)]
    pub yaw: f64,
    #[serde(default = "default_speed")]
    pub speed_cm_s: f64,
}

fn default_speed() -> f64 {
    Trajectory::DEFAULT_SPEED
}

impl PathSpec {
    pub fn trajectory(&self) -> Result<Trajectory, HarnessError> {
        Trajectory::line(self.from, self.to, self.yaw, self.speed_cm_s)
            .map_err(|e| HarnessError::InvalidSpec(e.to_string()))
    }

    /// Distance from `p` to the commanded segment.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        let (ax, ay) = self.from;
        let (dx, dy) = (self.to.0 - ax, self.to.1 - ay);
        let len2 = dx * dx + dy * dy;
        let s = if len2 > 0.0 { (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (p.0 - ax - s * dx).hypot(p.1 - ay - s * dy)
    }

    pub fn axis(&self) -> Axis {
        Axis::dominant(&[self.from, self.to])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Lamp centre jitter (working px).
    pub centroid_px: f64,
    /// LED pulse jitter (working rows).
    pub band_jitter_px: f64,
    /// Additive grey-level noise.
    pub pixel: f64,
}

fn default_version() -> u32 {
    SPEC_VERSION
}

fn default_reps() -> u32 {
    1
}

fn default_fps() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    pub mode: Mode,
    /// Named run (`A` to `F`) whose fields fill in anything left unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default)]
    pub render: RenderPreset,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "default_reps")]
    pub repetitions: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathSpec>,
    /// Static position (first entry) or grid points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// True principal point minus the assumed one (working px).
    #[serde(default)]
    pub principal_offset_px: (f64, f64),
    #[serde(default = "default_fps")]
    pub fps: f64,
}

impl ExperimentSpec {
    fn base(name: &str, mode: Mode) -> Self {
        Self {
            version: SPEC_VERSION,
            name: name.to_string(),
            mode,
            template: None,
            render: RenderPreset::Compressed,
            topology: Topology::Local,
            repetitions: 1,
            seed: 0,
            path: None,
            points: None,
            noise: NoiseSpec::default(),
            principal_offset_px: (0.0, 0.0),
            fps: 1.0,
        }
    }

    /// The line runs: A and B split/compressed, C local/compressed,
    /// D local/native, E and F split/native.
    pub fn template(letter: &str) -> Option<Self> {
        let (topology, render, from, to) = match letter {
            "A" => (Topology::Split, RenderPreset::Compressed, (-35.0, 0.0), (35.0, -0.5)),
            "B" => (Topology::Split, RenderPreset::Compressed, (0.0, -35.0), (-1.0, 35.0)),
            "C" => (Topology::Local, RenderPreset::Compressed, (-35.0, 0.0), (35.0, 0.0)),
            "D" => (Topology::Local, RenderPreset::Native, (0.0, -35.0), (0.0, 35.0)),
            "E" => (Topology::Split, RenderPreset::Native, (-35.0, 0.0), (35.0, 0.0)),
            "F" => (Topology::Split, RenderPreset::Native, (0.0, -35.0), (0.0, 35.0)),
            _ => return None,
        };
        Some(Self {
            template: Some(letter.to_string()),
            topology,
            render,
            path: Some(PathSpec { from, to, yaw: 0.0, speed_cm_s: Trajectory::DEFAULT_SPEED }),
            noise: NoiseSpec { band_jitter_px: 0.5, ..NoiseSpec::default() },
            ..Self::base(&format!("experiment-{letter}"), Mode::Dynamic)
        })
    }

    /// Repeated fixes at one position.
    pub fn static_at(x: f64, y: f64, repetitions: u32) -> Self {
        Self { points: Some(vec![(x, y)]), repetitions, ..Self::base("static", Mode::Static) }
    }

    /// The 36-point grid with 12 repetitions each.
    pub fn grid() -> Self {
        let points = GRID_COORDS.iter().flat_map(|&y| GRID_COORDS.iter().map(move |&x| (x, y))).collect();
        Self { points: Some(points), repetitions: GRID_REPETITIONS, ..Self::base("grid", Mode::Grid) }
    }

    /// Parses a JSON spec; fields of a named `template` fill in whatever
    /// the document leaves out.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let mut doc: Value = serde_json::from_str(text)?;
        let letter = doc.get("template").and_then(Value::as_str).map(str::to_string);
        if let Some(letter) = letter {
            let base = Self::template(&letter)
                .ok_or_else(|| HarnessError::InvalidSpec(format!("unknown template {letter:?}")))?;
            let Value::Object(mut merged) = serde_json::to_value(base)? else { unreachable!("spec is an object") };
            let Value::Object(user) = doc else {
                return Err(HarnessError::InvalidSpec("spec must be a JSON object".into()));
            };
            merged.extend(user);
            doc = Value::Object(merged);
        }
        let spec: Self = serde_json::from_value(doc)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.version != SPEC_VERSION {
            return Err(HarnessError::InvalidSpec(format!("unsupported version {}", self.version)));
        }
        if self.name.trim().is_empty() {
            return bad("name must not be empty");
        }
        if self.repetitions < 1 {
            return bad("repetitions must be at least 1");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        let n = self.noise;
        if [n.centroid_px, n.band_jitter_px, n.pixel].iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels must be non-negative");
        }
        if !(self.principal_offset_px.0.is_finite() && self.principal_offset_px.1.is_finite()) {
            return bad("principal point offset must be finite");
        }
        match self.mode {
            Mode::Dynamic => {
                let Some(path) = &self.path else { return bad("dynamic mode needs a path") };
                path.trajectory()?;
            }
            Mode::Grid | Mode::Static => {
                if self.points.as_ref().is_some_and(|p| p.is_empty()) {
                    return bad("points must not be empty");
                }
            }
        }
        if let Some(t) = &self.template {
            if Self::template(t).is_none() {
                return Err(HarnessError::InvalidSpec(format!("unknown template {t:?}")));
            }
        }
        Ok(())
    }

    /// Render settings of run `run`.
    pub fn render_config(&self, run: u32) -> RenderConfig {
        RenderConfig {
            fps: self.fps,
            centroid_noise_px: self.noise.centroid_px,
            band_jitter_px: self.noise.band_jitter_px,
            pixel_noise: self.noise.pixel,
            principal_offset_px: self.principal_offset_px,
            seed: self.seed.wrapping_add(run as u64),
            ..self.render.render()
        }
    }

    fn points_or(&self, default: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        self.points.clone().unwrap_or(default)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub spec: ExperimentSpec,
    pub stats: ErrorStats,
    /// Static mode: fixes after estimating the principal point.
    pub corrected: Option<ErrorStats>,
    /// Static mode: principal point found by calibration (working px).
    pub calibrated_center: Option<(f64, f64)>,
    pub latency: LatencyReport,
    /// Frames the pipeline was asked to solve.
    pub attempted: usize,
    /// Pipeline runs that failed, with the reason.
    pub failures: Vec<String>,
    /// Two working pixels of footprint on the LED plane (cm).
    pub quantization_bound_cm: f64,
}

impl ExperimentOutcome {
    /// Some runs failed or some frames gave no fix.
    pub fn degraded(&self) -> bool {
        let fixes = self.stats.samples.len() + self.corrected.as_ref().map_or(0, |c| c.samples.len());
        let expected = self.attempted * if self.corrected.is_some() { 2 } else { 1 };
        !self.failures.is_empty() || fixes < expected
    }
}

/// Collects pipeline runs, renumbering latency rows so fix ids stay unique.
#[derive(Default)]
struct Collector {
    samples: Vec<Sample>,
    fixes: Vec<PoseFix>,
    latency: LatencyReport,
    attempted: usize,
    failures: Vec<String>,
}

impl Collector {
    fn add(&mut self, run: u32, out: Result<PipelineOutput, HarnessError>, scene: &ScenePlatform, path: Option<&PathSpec>) {
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                self.failures.push(format!("run {run}: {e}"));
                return;
            }
        };
        let base = self.attempted as u32;
        self.attempted += out.frames();
        for row in &out.latency.rows {
            self.latency.push(base + row.fix_seq, row.stage, row.ns);
        }
        for p in &out.positions {
            let Some(truth) = out.truth.get(p.source_frame_seq as usize) else { continue };
            let est = (p.x_w, p.y_w);
            let pose = truth.pose;
            self.samples.push(Sample {
                run,
                frame: p.source_frame_seq,
                t: truth.t,
                truth_x: pose.x,
                truth_y: pose.y,
                est_x: est.0,
                est_y: est.1,
                error_cm: (est.0 - pose.x).hypot(est.1 - pose.y),
                path_error_cm: path.map(|l| l.distance(est)),
            });
            self.fixes.push(to_fix(p, scene));
        }
    }
}

fn to_fix(p: &PositionBody, scene: &ScenePlatform) -> PoseFix {
    PoseFix {
        x_w: p.x_w,
        y_w: p.y_w,
        z_w: p.z_w,
        height: scene.led_plane_z - p.z_w,
        theta: p.theta,
        timestamp_ns: p.solve_timestamp_ns,
        pair: (p.pair.0.as_str().into(), p.pair.1.as_str().into()),
    }
}

fn pipeline_config(spec: &ExperimentSpec, intrinsics: Option<CameraIntrinsics>) -> PipelineConfig {
    PipelineConfig { topology: spec.topology, intrinsics, ..PipelineConfig::default() }
}

fn random_yaw(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-PI..PI)
}

/// One frame per pose at random headings; returns the poses' collector.
fn run_poses(
    spec: &ExperimentSpec,
    scene: &ScenePlatform,
    points: &[(f64, f64)],
    intrinsics: Option<CameraIntrinsics>,
    rng: &mut ChaCha8Rng,
    first_run: u32,
) -> Collector {
    let cfg = pipeline_config(spec, intrinsics);
    let mut c = Collector::default();
    let mut run = first_run;
    for &(x, y) in points {
        for _ in 0..spec.repetitions {
            let traj = Trajectory::stationary(x, y, random_yaw(rng));
            let out = run_pipeline(scene, &traj, &spec.render_config(run), &cfg).map_err(HarnessError::from);
            c.add(run, out, scene, None);
            run += 1;
        }
    }
    c
}

/// Runs `spec` through the simulator and node pipeline.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, HarnessError> {
    spec.validate()?;
    let render = spec.render_config(0);
    let scene = ScenePlatform::default_scene(render.timing());
    let nominal = render.intrinsics();
    let bound = nominal.quantization_bound(scene.led_plane_z);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corrected = None;
    let mut calibrated_center = None;

    let (c, fit_axis) = match spec.mode {
        Mode::Dynamic => {
            let path = spec.path.expect("validated");
            let traj = path.trajectory()?;
            let cfg = pipeline_config(spec, None);
            let mut c = Collector::default();
            for run in 0..spec.repetitions {
                let out = run_pipeline(&scene, &traj, &spec.render_config(run), &cfg).map_err(HarnessError::from);
                c.add(run, out, &scene, Some(&path));
            }
            (c, Some(path.axis()))
        }
        Mode::Grid => {
            let points = spec.points_or(ExperimentSpec::grid().points.expect("grid has points"));
            (run_poses(spec, &scene, &points, None, &mut rng, 0), None)
        }
        Mode::Static => {
            let point = spec.points_or(vec![(0.0, 0.0)])[0];
            let mut c = run_poses(spec, &scene, &[point], None, &mut rng, 0);
            if !c.fixes.is_empty() {
                let intr = calibrate_center(&c.fixes, point, &nominal)?;
                calibrated_center = Some(intr.principal_point);
                let mut fixed = run_poses(spec, &scene, &[point], Some(intr), &mut rng, spec.repetitions);
                c.failures.append(&mut fixed.failures);
                let base = c.attempted as u32;
                for row in &fixed.latency.rows {
                    c.latency.push(base + row.fix_seq, row.stage, row.ns);
                }
                if !fixed.samples.is_empty() {
                    corrected = Some(error_distribution(fixed.samples, None)?);
                }
            }
            (c, None)
        }
    };

    if c.samples.is_empty() {
        return Err(HarnessError::NoFixes(c.failures.len()));
    }
    Ok(ExperimentOutcome {
        spec: spec.clone(),
        stats: error_distribution(c.samples, fit_axis)?,
        corrected,
        calibrated_center,
        latency: c.latency,
        attempted: c.attempted,
        failures: c.failures,
        quantization_bound_cm: bound,
    })
}
