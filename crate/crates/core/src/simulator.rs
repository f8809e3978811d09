//! Deterministic stand-in for the camera rig: projects ceiling luminaires
//! into rolling-shutter frames along a scripted robot trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{synthesize_stripes, Disk, JitteredPulseTrain, LuminaireDatabase, PwmWave, RowTiming, Waveform};
use crate::geometry::CameraIntrinsics;
use crate::types::{Frame, LedId, PixelPoint, WorldPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("point is not in front of the camera")]
    NotVisible,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(&'static str),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid render configuration: {0}")]
    InvalidConfig(&'static str),
}

/// Camera pose: position in cm and yaw about the vertical axis in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl CameraPose {
    pub const fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self { x, y, z, yaw }
    }
}

/// Pinhole projection for an upward-looking camera. Camera axes relate to
/// world axes by `world = R(yaw) * camera` with `R` as used by
/// [`crate::geometry::to_world`].
pub fn project(
    p: &WorldPoint,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> Result<PixelPoint, SimError> {
    let h = p.z - pose.z;
    if !(h > 0.0) {
        return Err(SimError::NotVisible);
    }
    let (s, c) = pose.yaw.sin_cos();
    let (dx, dy) = (p.x - pose.x, p.y - pose.y);
    let xc = c * dx - s * dy;
    let yc = s * dx + c * dy;
    let k = intr.f0 / (h * intr.dx * intr.scale());
    Ok(PixelPoint::new(intr.principal_point.0 + k * xc, intr.principal_point.1 + k * yc))
}

/// A lamp hidden over `[from_s, to_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub lamp_id: LedId,
    pub from_s: f64,
    pub to_s: f64,
}

impl Occlusion {
    pub fn covers(&self, id: &LedId, t: f64) -> bool {
        &self.lamp_id == id && t >= self.from_s && t < self.to_s
    }
}

#[derive(Debug, Clone)]
pub struct ScenePlatform {
    /// Floor extent (cm), centred on the origin.
    pub extent: (f64, f64),
    pub led_plane_z: f64,
    pub luminaires: LuminaireDatabase,
    pub occlusions: Vec<Occlusion>,
}

impl ScenePlatform {
    pub fn new(extent: (f64, f64), led_plane_z: f64, luminaires: LuminaireDatabase) -> Result<Self, SimError> {
        for r in luminaires.records() {
            if (r.position.z - led_plane_z).abs() > 1e-9 {
                return Err(SimError::InvalidScene(format!(
                    "luminaire {} is at z = {} instead of {}",
                    r.id, r.position.z, led_plane_z
                )));
            }
        }
        Ok(Self { extent, led_plane_z, luminaires, occlusions: Vec::new() })
    }

    /// 100 x 100 cm platform under four lamps at 150 cm.
    pub fn default_scene(timing: RowTiming) -> Self {
        Self::new((100.0, 100.0), 150.0, LuminaireDatabase::default_table(timing))
            .expect("default scene is valid")
    }

    pub fn with_occlusions(mut self, occlusions: Vec<Occlusion>) -> Self {
        self.occlusions = occlusions;
        self
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.extent.0 / 2.0 && y.abs() <= self.extent.1 / 2.0
    }

    fn occluded(&self, id: &LedId, t: f64) -> bool {
        self.occlusions.iter().any(|o| o.covers(id, t))
    }
}

/// Sensor, timing and noise settings for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub f0: f64,
    pub dx: f64,
    pub native_res: (u32, u32),
    pub working_res: (u32, u32),
    /// Delay between native row readouts (s).
    pub t_row: f64,
    /// Row exposure (s).
    pub t_exp: f64,
    pub fps: f64,
    /// Gaussian jitter of each rendered lamp centre, in working pixels.
    pub centroid_noise_px: f64,
    /// Gaussian jitter of each LED pulse, in working rows of readout time.
    pub band_jitter_px: f64,
    /// Additive Gaussian pixel noise (grey levels).
    pub pixel_noise: f64,
    /// Physical radius of the LED disk (cm).
    pub led_radius_cm: f64,
    pub seed: u64,
    /// Offset of the sensor's true principal point from the image centre
    /// (working px). Locators that assume the centre see a biased image.
    #[serde(default)]
    pub principal_offset_px: (f64, f64),
}

impl RenderConfig {
    /// Exposure used by the camera driver in the node pipeline.
    pub const DRIVER_T_EXP: f64 = 200e-6;

    pub fn native() -> Self {
        Self {
            f0: CameraIntrinsics::DEFAULT_F0_CM,
            dx: CameraIntrinsics::DEFAULT_DX_CM,
            native_res: CameraIntrinsics::NATIVE_RES,
            working_res: CameraIntrinsics::NATIVE_RES,
            t_row: RowTiming::DEFAULT_T_ROW,
            t_exp: RowTiming::DEFAULT_T_EXP,
            fps: 1.0,
            centroid_noise_px: 0.0,
            band_jitter_px: 0.0,
            pixel_noise: 0.0,
            led_radius_cm: 5.0,
            seed: 0,
            principal_offset_px: (0.0, 0.0),
        }
    }

    pub fn compressed() -> Self {
        Self { working_res: CameraIntrinsics::COMPRESSED_RES, ..Self::native() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.t_exp > 0.0) || !(self.t_row > 0.0) {
            return Err(SimError::InvalidConfig("row time and exposure must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(SimError::InvalidConfig("frame rate must be positive"));
        }
        CameraIntrinsics::new(self.f0, self.dx, self.native_res, self.working_res)
            .map_err(|_| SimError::InvalidConfig("invalid sensor geometry"))?;
        Ok(())
    }

    pub fn timing(&self) -> RowTiming {
        RowTiming {
            t_row: self.t_row,
            t_exp: self.t_exp,
            native_rows: self.native_res.1,
            working_rows: self.working_res.1,
        }
    }

    /// Intrinsics of the delivered (working) image.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(self.f0, self.dx, self.native_res, self.working_res)
            .expect("render configuration holds valid intrinsics")
    }

    /// Working-image intrinsics including the true principal point.
    pub fn true_intrinsics(&self) -> CameraIntrinsics {
        let i = self.intrinsics();
        let (ox, oy) = self.principal_offset_px;
        i.with_principal_point(i.principal_point.0 + ox, i.principal_point.1 + oy)
    }

    /// Intrinsics of the full-resolution sensor, true principal point.
    pub fn native_intrinsics(&self) -> CameraIntrinsics {
        let i = CameraIntrinsics::new(self.f0, self.dx, self.native_res, self.native_res)
            .expect("render configuration holds valid intrinsics");
        let a = self.scale();
        let (ox, oy) = self.principal_offset_px;
        i.with_principal_point(i.principal_point.0 + ox * a, i.principal_point.1 + oy * a)
    }

    pub fn scale(&self) -> f64 {
        self.native_res.0 as f64 / self.working_res.0 as f64
    }

    pub fn is_compressed(&self) -> bool {
        self.native_res != self.working_res
    }
}

/// Ground-truth image of one lamp in working pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LampImage {
    pub id: LedId,
    pub center: PixelPoint,
    pub radius: f64,
    /// Entire disk lies inside the frame.
    pub inside: bool,
    pub occluded: bool,
}

/// Working-pixel position of a native sensor coordinate under
/// nearest-neighbour downscaling by `a`.
pub fn native_to_working(x: f64, a: f64) -> f64 {
    (x + 0.5) / a - 0.5
}

/// Where each luminaire appears for a camera pose, without noise.
pub fn lamp_images(scene: &ScenePlatform, pose: &CameraPose, t: f64, render: &RenderConfig) -> Vec<LampImage> {
    let native = render.native_intrinsics();
    let a = render.scale();
    let (nw, nh) = render.native_res;
    scene
        .luminaires
        .records()
        .iter()
        .filter_map(|r| {
            let p = project(&r.position, pose, &native).ok()?;
            let radius = render.led_radius_cm * render.f0 / ((r.position.z - pose.z) * render.dx);
            let inside = p.u - radius >= 0.0
                && p.v - radius >= 0.0
                && p.u + radius <= nw as f64 - 1.0
                && p.v + radius <= nh as f64 - 1.0;
            Some(LampImage {
                id: r.id.clone(),
                center: PixelPoint::new(native_to_working(p.u, a), native_to_working(p.v, a)),
                radius: radius / a,
                inside,
                occluded: scene.occluded(&r.id, t),
            })
        })
        .collect()
}

fn frame_rng(seed: u64, t_ns: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ t_ns.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Renders the native sensor image at time `t` (seconds).
pub fn render_native(scene: &ScenePlatform, pose: &CameraPose, t: f64, render: &RenderConfig) -> Frame {
    let t_ns = (t * 1e9).round() as u64;
    let (nw, nh) = render.native_res;
    let mut frame = Frame::new(nw, nh, t_ns);
    let native = render.native_intrinsics();
    let a = render.scale();
    let timing = render.timing();
    let mut rng = frame_rng(render.seed, t_ns);
    let centroid_noise = Normal::new(0.0, (render.centroid_noise_px * a).max(0.0)).ok();
    let t0 = t_ns as f64 * 1e-9;
    let t_end = t0 + nh as f64 * render.t_row + render.t_exp;
    for rec in scene.luminaires.records() {
        let Ok(mut p) = project(&rec.position, pose, &native) else { continue };
        // Draw noise before the visibility checks so the random stream does
        // not depend on which lamps are in view.
        if let Some(n) = centroid_noise.filter(|_| render.centroid_noise_px > 0.0) {
            p.u += n.sample(&mut rng);
            p.v += n.sample(&mut rng);
        }
        let pulse_rng_seed: u64 = rng.random();
        if scene.occluded(&rec.id, t) {
            continue;
        }
        let radius = render.led_radius_cm * render.f0 / ((rec.position.z - pose.z) * render.dx);
        let disk = Disk { cx: p.u, cy: p.v, radius };
        if p.u + radius < 0.0 || p.v + radius < 0.0 || p.u - radius > nw as f64 || p.v - radius > nh as f64 {
            continue;
        }
        let patch = if render.band_jitter_px > 0.0 {
            let sigma = render.band_jitter_px * timing.effective_row_time();
            let mut pulse_rng = ChaCha8Rng::seed_from_u64(pulse_rng_seed);
            let wave = JitteredPulseTrain::new(&rec.profile, sigma, t0, t_end, &mut pulse_rng);
            synthesize_stripes(&wave as &dyn Waveform, &timing, &disk, t0, (nw, nh))
        } else {
            synthesize_stripes(&PwmWave::new(&rec.profile), &timing, &disk, t0, (nw, nh))
        };
        for y in 0..patch.height {
            let src = &patch.pixels[(y * patch.width) as usize..((y + 1) * patch.width) as usize];
            let row_start = ((patch.y0 + y) * nw + patch.x0) as usize;
            let dst = &mut frame.pixels[row_start..row_start + patch.width as usize];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (*d).max(s);
            }
        }
    }
    if render.pixel_noise > 0.0 {
        if let Ok(n) = Normal::new(0.0, render.pixel_noise) {
            for px in frame.pixels.iter_mut() {
                let v = *px as f64 + n.sample(&mut rng);
                *px = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    frame
}

/// Nearest-neighbour resize: working pixel `(u, v)` takes native pixel
/// `(floor(u * W / w), floor(v * H / h))`.
pub fn downscale_nearest(src: &Frame, width: u32, height: u32) -> Frame {
    if src.width == width && src.height == height {
        return src.clone();
    }
    let cols: Vec<usize> = (0..width as u64)
        .map(|u| (u * src.width as u64 / width as u64) as usize)
        .collect();
    let mut out = Frame::new(width, height, src.timestamp_ns);
    for v in 0..height {
        let sy = (v as u64 * src.height as u64 / height as u64) as u32;
        let row = src.row(sy);
        let dst = &mut out.pixels[(v * width) as usize..((v + 1) * width) as usize];
        for (d, &c) in dst.iter_mut().zip(&cols) {
            *d = row[c];
        }
    }
    out
}

/// Renders the working image the camera delivers at time `t`.
pub fn render_frame(scene: &ScenePlatform, pose: &CameraPose, t: f64, render: &RenderConfig) -> Frame {
    let native = render_native(scene, pose, t, render);
    downscale_nearest(&native, render.working_res.0, render.working_res.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    /// Seconds from the start of the run.
    pub t: f64,
}

/// Piecewise-linear robot path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    /// Camera height above the floor (cm).
    pub camera_z: f64,
}

impl Trajectory {
    /// Robot speed used in the line experiments (cm/s).
    pub const DEFAULT_SPEED: f64 = 0.4;

    pub fn new(waypoints: Vec<Waypoint>, camera_z: f64) -> Result<Self, SimError> {
        if waypoints.is_empty() {
            return Err(SimError::InvalidTrajectory("no waypoints"));
        }
        if waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(SimError::InvalidTrajectory("timestamps must increase strictly"));
        }
        Ok(Self { waypoints, camera_z })
    }

    /// Straight run between two points at constant speed and heading.
    pub fn line(from: (f64, f64), to: (f64, f64), yaw: f64, speed: f64) -> Result<Self, SimError> {
        if !(speed > 0.0) {
            return Err(SimError::InvalidTrajectory("speed must be positive"));
        }
        let start = Waypoint { x: from.0, y: from.1, yaw, t: 0.0 };
        let len = (to.0 - from.0).hypot(to.1 - from.1);
        if len == 0.0 {
            return Self::new(vec![start], 0.0);
        }
        let end = Waypoint { x: to.0, y: to.1, yaw, t: len / speed };
        Self::new(vec![start, end], 0.0)
    }

    /// A single pose at `t = 0`.
    pub fn stationary(x: f64, y: f64, yaw: f64) -> Self {
        Self { waypoints: vec![Waypoint { x, y, yaw, t: 0.0 }], camera_z: 0.0 }
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().map(|w| w.t).unwrap_or(0.0) - self.waypoints[0].t
    }

    pub fn pose_at(&self, t: f64) -> CameraPose {
        let w = &self.waypoints;
        let at = |p: &Waypoint| CameraPose::new(p.x, p.y, self.camera_z, p.yaw);
        if t <= w[0].t {
            return at(&w[0]);
        }
        for pair in w.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if t <= b.t {
                let s = (t - a.t) / (b.t - a.t);
                return CameraPose::new(
                    a.x + s * (b.x - a.x),
                    a.y + s * (b.y - a.y),
                    self.camera_z,
                    a.yaw + s * (b.yaw - a.yaw),
                );
            }
        }
        at(&w[w.len() - 1])
    }

    /// Reverses the direction of travel, keeping the same timing.
    pub fn reversed(&self) -> Self {
        let t_end = self.waypoints.last().map(|w| w.t).unwrap_or(0.0);
        let t0 = self.waypoints[0].t;
        let waypoints = self
            .waypoints
            .iter()
            .rev()
            .map(|p| Waypoint { t: t0 + t_end - p.t, ..*p })
            .collect();
        Self { waypoints, camera_z: self.camera_z }
    }

    /// Frame times `k / fps` covering the trajectory.
    pub fn frame_times(&self, fps: f64) -> Vec<f64> {
        let t0 = self.waypoints[0].t;
        let n = (self.duration() * fps + 1e-9).floor() as u64;
        (0..=n).map(|k| t0 + k as f64 / fps).collect()
    }
}

/// One rendered frame with the pose it was taken from.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub index: u32,
    pub frame: Frame,
    pub pose: CameraPose,
}

/// Lazily renders every frame of a trajectory.
pub fn run_trajectory<'a>(
    scene: &'a ScenePlatform,
    traj: &'a Trajectory,
    render: &'a RenderConfig,
) -> impl Iterator<Item = SimFrame> + 'a {
    traj.frame_times(render.fps)
        .into_iter()
        .enumerate()
        .map(move |(k, t)| {
            let pose = traj.pose_at(t);
            SimFrame { index: k as u32, frame: render_frame(scene, &pose, t, render), pose }
        })
}
