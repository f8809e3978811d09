//! Double-lamp pose estimation for an upward-looking camera.
//!
//! Image coordinates are computed in working pixels scaled by `dx * a` and
//! paired with the native focal length `f0`. The alternative route (plain
//! pitch `dx` with the equivalent focal length `f1 = f0 / a`) is available
//! through [`FocalConvention::EquivalentFocal`] and yields identical fixes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{wrap_angle, ImagePoint, LedId, PixelPoint, WorldPoint};

/// Tolerance for treating two LED heights as the same plane (cm).
const PLANE_TOLERANCE_CM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({u}, {v}) is outside the {width}x{height} working image")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("lamps lie at different heights ({z1} cm vs {z2} cm)")]
    UnsupportedConfiguration { z1: f64, z2: f64 },
    #[error("height must be positive, got {0}")]
    NonPositiveHeight(f64),
    #[error("at least two identified lamps are required, got {0}")]
    InsufficientAnchors(usize),
    #[error("no lamp pair differs in both world x and world y")]
    DegenerateLayout,
    #[error("no static fixes supplied for calibration")]
    EmptyCalibration,
}

/// Which pitch/focal pair converts working pixels to the sensor plane.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FocalConvention {
    /// Pitch `dx * a`, focal length `f0`.
    #[default]
    ScaledPitch,
    /// Pitch `dx`, focal length `f1 = f0 / a`.
    EquivalentFocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Native focal length (cm).
    pub f0: f64,
    /// Native pixel pitch (cm per pixel).
    pub dx: f64,
    pub native_res: (u32, u32),
    pub working_res: (u32, u32),
    /// Principal point in working pixels.
    pub principal_point: (f64, f64),
}

impl CameraIntrinsics {
    /// Sensor pitch of 3.2 um.
    pub const DEFAULT_DX_CM: f64 = 3.2e-4;
    pub const DEFAULT_F0_CM: f64 = 0.4;
    pub const NATIVE_RES: (u32, u32) = (2048, 1536);
    pub const COMPRESSED_RES: (u32, u32) = (800, 600);

    /// Builds intrinsics with the principal point at the geometric centre of
    /// the working image.
    pub fn new(
        f0: f64,
        dx: f64,
        native_res: (u32, u32),
        working_res: (u32, u32),
    ) -> Result<Self, GeometryError> {
        if !(f0 > 0.0 && f0.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("f0 must be positive"));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("dx must be positive"));
        }
        if native_res.0 == 0 || native_res.1 == 0 || working_res.0 == 0 || working_res.1 == 0 {
            return Err(GeometryError::InvalidIntrinsics("resolution must be non-zero"));
        }
        let ax = native_res.0 as f64 / working_res.0 as f64;
        let ay = native_res.1 as f64 / working_res.1 as f64;
        if (ax - ay).abs() > 1e-9 * ax {
            return Err(GeometryError::InvalidIntrinsics(
                "compression must preserve aspect ratio",
            ));
        }
        Ok(Self {
            f0,
            dx,
            native_res,
            working_res,
            principal_point: (
                (working_res.0 as f64 - 1.0) / 2.0,
                (working_res.1 as f64 - 1.0) / 2.0,
            ),
        })
    }

    /// Full-resolution 2048x1536 camera.
    pub fn native() -> Self {
        Self::new(Self::DEFAULT_F0_CM, Self::DEFAULT_DX_CM, Self::NATIVE_RES, Self::NATIVE_RES)
            .expect("preset intrinsics are valid")
    }

    /// Same sensor with frames scaled down to 800x600.
    pub fn compressed() -> Self {
        Self::new(
            Self::DEFAULT_F0_CM,
            Self::DEFAULT_DX_CM,
            Self::NATIVE_RES,
            Self::COMPRESSED_RES,
        )
        .expect("preset intrinsics are valid")
    }

    pub fn with_principal_point(mut self, cx: f64, cy: f64) -> Self {
        self.principal_point = (cx, cy);
        self
    }

    /// Scale factor `a = native_width / working_width`.
    pub fn scale(&self) -> f64 {
        self.native_res.0 as f64 / self.working_res.0 as f64
    }

    /// Equivalent focal length `f1 = f0 / a`.
    pub fn f1(&self) -> f64 {
        self.f0 / self.scale()
    }

    pub fn pitch(&self, convention: FocalConvention) -> f64 {
        match convention {
            FocalConvention::ScaledPitch => self.dx * self.scale(),
            FocalConvention::EquivalentFocal => self.dx,
        }
    }

    pub fn focal(&self, convention: FocalConvention) -> f64 {
        match convention {
            FocalConvention::ScaledPitch => self.f0,
            FocalConvention::EquivalentFocal => self.f1(),
        }
    }

    /// Size on the LED plane of one working pixel at height `h` (cm).
    pub fn pixel_footprint(&self, h: f64) -> f64 {
        self.dx * self.scale() * h / self.f0
    }

    /// Round-trip error bound on the LED plane: two working pixels of footprint.
    pub fn quantization_bound(&self, h: f64) -> f64 {
        2.0 * self.pixel_footprint(h)
    }
}

/// Estimated camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFix {
    pub x_w: f64,
    pub y_w: f64,
    pub z_w: f64,
    /// Vertical distance from the camera to the LED plane (cm).
    pub height: f64,
    /// Yaw in `(-pi, pi]`.
    pub theta: f64,
    pub timestamp_ns: u64,
    pub pair: (LedId, LedId),
}

/// A lamp identified in the image with its known world position.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedLamp {
    pub id: LedId,
    pub world: WorldPoint,
    pub pixel: PixelPoint,
}

impl ObservedLamp {
    pub fn new(id: impl Into<LedId>, world: WorldPoint, pixel: PixelPoint) -> Self {
        Self { id: id.into(), world, pixel }
    }
}

/// Options for [`locate_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocateOptions {
    pub convention: FocalConvention,
    /// Constant yaw offset between the camera body and the robot (rad).
    pub mounting_offset: f64,
}

pub fn pixel_to_image(p: PixelPoint, intr: &CameraIntrinsics) -> Result<ImagePoint, GeometryError> {
    pixel_to_image_with(p, intr, FocalConvention::ScaledPitch)
}

pub fn pixel_to_image_with(
    p: PixelPoint,
    intr: &CameraIntrinsics,
    convention: FocalConvention,
) -> Result<ImagePoint, GeometryError> {
    let (w, h) = intr.working_res;
    let inside = p.u >= 0.0 && p.v >= 0.0 && p.u < w as f64 && p.v < h as f64;
    if !inside {
        return Err(GeometryError::PixelOutOfBounds { u: p.u, v: p.v, width: w, height: h });
    }
    let pitch = intr.pitch(convention);
    let (cx, cy) = intr.principal_point;
    Ok(ImagePoint::new((p.u - cx) * pitch, (p.v - cy) * pitch))
}

/// Height of the LED plane above the camera from the ratio of world to image
/// separation of two lamps, `H = f * D / d`.
pub fn estimate_height(
    l1: &WorldPoint,
    l2: &WorldPoint,
    p1: &ImagePoint,
    p2: &ImagePoint,
    focal: f64,
) -> Result<f64, GeometryError> {
    if (l1.z - l2.z).abs() > PLANE_TOLERANCE_CM {
        return Err(GeometryError::UnsupportedConfiguration { z1: l1.z, z2: l2.z });
    }
    let world_sep = l1.planar_distance(l2);
    if world_sep == 0.0 {
        return Err(GeometryError::Degenerate("lamps coincide in the horizontal plane"));
    }
    let image_sep = p1.distance(p2);
    if image_sep == 0.0 {
        return Err(GeometryError::Degenerate("image points coincide"));
    }
    Ok(focal * world_sep / image_sep)
}

/// Camera position in a frame aligned with the image axes, by similar
/// triangles through the midpoint of the two lamps.
pub fn estimate_planar(
    l1: &WorldPoint,
    l2: &WorldPoint,
    p1: &ImagePoint,
    p2: &ImagePoint,
    h: f64,
    focal: f64,
) -> Result<(f64, f64), GeometryError> {
    if !(h > 0.0) {
        return Err(GeometryError::NonPositiveHeight(h));
    }
    let mid_x = (l1.x + l2.x) / 2.0;
    let mid_y = (l1.y + l2.y) / 2.0;
    let k = h / focal;
    Ok((mid_x - k * (p1.i + p2.i) / 2.0, mid_y - k * (p1.j + p2.j) / 2.0))
}

/// Direction of the image vector from the second lamp to the first.
pub fn estimate_rotation(p1: &ImagePoint, p2: &ImagePoint) -> Result<f64, GeometryError> {
    let di = p1.i - p2.i;
    let dj = p1.j - p2.j;
    if di == 0.0 && dj == 0.0 {
        return Err(GeometryError::Degenerate("image points coincide"));
    }
    Ok(wrap_angle(dj.atan2(di)))
}

/// Applies `R(phi) = [[cos, sin, 0], [-sin, cos, 0], [0, 0, 1]]`.
pub fn to_world(x: f64, y: f64, z: f64, phi: f64) -> WorldPoint {
    let (s, c) = phi.sin_cos();
    WorldPoint::new(c * x + s * y, -s * x + c * y, z)
}

/// Picks the pair differing in both world x and y with the largest image
/// separation. Ties go to the lexicographically smallest id pair.
pub fn select_lamp_pair(
    lamps: &[ObservedLamp],
) -> Result<(&ObservedLamp, &ObservedLamp), GeometryError> {
    if lamps.len() < 2 {
        return Err(GeometryError::InsufficientAnchors(lamps.len()));
    }
    let mut best: Option<(f64, (&LedId, &LedId), usize, usize)> = None;
    for a in 0..lamps.len() {
        for b in (a + 1)..lamps.len() {
            let (la, lb) = (&lamps[a], &lamps[b]);
            if la.world.x == lb.world.x || la.world.y == lb.world.y {
                continue;
            }
            let sep = la.pixel.distance(&lb.pixel);
            let key = if la.id <= lb.id { (&la.id, &lb.id) } else { (&lb.id, &la.id) };
            let better = match &best {
                None => true,
                Some((best_sep, best_key, _, _)) => {
                    sep > *best_sep || (sep == *best_sep && key < *best_key)
                }
            };
            if better {
                best = Some((sep, key, a, b));
            }
        }
    }
    let (_, _, a, b) = best.ok_or(GeometryError::DegenerateLayout)?;
    Ok((&lamps[a], &lamps[b]))
}

pub fn locate(
    l1: &ObservedLamp,
    l2: &ObservedLamp,
    intr: &CameraIntrinsics,
) -> Result<PoseFix, GeometryError> {
    locate_with(l1, l2, intr, LocateOptions::default())
}

/// Full pose from one lamp pair.
///
/// The yaw is the image bearing of the pair minus its world bearing, so the
/// pair need not be aligned with the world x axis.
pub fn locate_with(
    l1: &ObservedLamp,
    l2: &ObservedLamp,
    intr: &CameraIntrinsics,
    opts: LocateOptions,
) -> Result<PoseFix, GeometryError> {
    let focal = intr.focal(opts.convention);
    let p1 = pixel_to_image_with(l1.pixel, intr, opts.convention)?;
    let p2 = pixel_to_image_with(l2.pixel, intr, opts.convention)?;
    let h = estimate_height(&l1.world, &l2.world, &p1, &p2, focal)?;
    let theta_img = estimate_rotation(&p1, &p2)?;
    let bearing = (l1.world.y - l2.world.y).atan2(l1.world.x - l2.world.x);
    let phi = wrap_angle(theta_img - bearing + opts.mounting_offset);
    let (px, py) = estimate_planar(&l1.world, &l2.world, &p1, &p2, h, focal)?;
    let mid_x = (l1.world.x + l2.world.x) / 2.0;
    let mid_y = (l1.world.y + l2.world.y) / 2.0;
    // The planar estimate lives in camera-aligned axes around the midpoint.
    let offset = to_world(px - mid_x, py - mid_y, 0.0, phi);
    Ok(PoseFix {
        x_w: mid_x + offset.x,
        y_w: mid_y + offset.y,
        z_w: l1.world.z - h,
        height: h,
        theta: phi,
        timestamp_ns: 0,
        pair: (l1.id.clone(), l2.id.clone()),
    })
}

/// Estimates the true principal point from fixes of a camera held at a known
/// planar position. Each planar error is mapped back to pixels through the
/// fix's own height and yaw, and the mean is removed from the assumed centre.
pub fn calibrate_center(
    fixes: &[PoseFix],
    truth: (f64, f64),
    intr: &CameraIntrinsics,
) -> Result<CameraIntrinsics, GeometryError> {
    if fixes.is_empty() {
        return Err(GeometryError::EmptyCalibration);
    }
    let pitch = intr.dx * intr.scale();
    let (mut su, mut sv) = (0.0, 0.0);
    for fix in fixes {
        if !(fix.height > 0.0) {
            return Err(GeometryError::NonPositiveHeight(fix.height));
        }
        let e = to_world(fix.x_w - truth.0, fix.y_w - truth.1, 0.0, -fix.theta);
        let k = intr.f0 / (fix.height * pitch);
        su += k * e.x;
        sv += k * e.y;
    }
    let n = fixes.len() as f64;
    let (cx, cy) = intr.principal_point;
    Ok(intr.with_principal_point(cx - su / n, cy - sv / n))
}
