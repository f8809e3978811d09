//! Small value types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Identity a luminaire encodes through its modulation profile.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LedId(pub String);

impl LedId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for LedId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&str> for LedId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Pixel coordinates in the working image. Origin top-left, `u` along columns,
/// `v` along rows; pixel `(u, v)` has its centre at the integer coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Physical sensor-plane coordinates in cm, origin at the principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub i: f64,
    pub j: f64,
}

impl ImagePoint {
    pub const fn new(i: f64, j: f64) -> Self {
        Self { i, j }
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.i - other.i).hypot(self.j - other.j)
    }
}

/// World coordinates in cm. The platform floor is `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn planar_distance(&self, other: &WorldPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Pixel encodings understood by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Encoding {
    Mono8 = 0,
}

impl Encoding {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Mono8),
            _ => None,
        }
    }

    pub fn bytes_per_pixel(self) -> usize {
        1
    }
}

/// A timestamped grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub timestamp_ns: u64,
    pub width: u32,
    pub height: u32,
    pub encoding: Encoding,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, timestamp_ns: u64) -> Self {
        Self {
            timestamp_ns,
            width,
            height,
            encoding: Encoding::Mono8,
            pixels: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, timestamp_ns: u64, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == width as usize * height as usize).then_some(Self {
            timestamp_ns,
            width,
            height,
            encoding: Encoding::Mono8,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let w = self.width as usize;
        &self.pixels[y as usize * w..(y as usize + 1) * w]
    }

    /// Copies a rectangle into a new frame with the same timestamp.
    pub fn crop(&self, r: &PixelRect) -> Frame {
        let mut out = Frame::new(r.width, r.height, self.timestamp_ns);
        for y in 0..r.height {
            let src = &self.row(r.y0 + y)[r.x0 as usize..(r.x0 + r.width) as usize];
            let w = r.width as usize;
            out.pixels[y as usize * w..(y as usize + 1) * w].copy_from_slice(src);
        }
        out
    }

    pub fn timestamp_s(&self) -> f64 {
        self.timestamp_ns as f64 * 1e-9
    }
}

/// Integer rectangle inside a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn x1(&self) -> u32 {
        self.x0 + self.width
    }

    pub fn y1(&self) -> u32 {
        self.y0 + self.height
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

/// Tracking window with a fractional centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchWindow {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl SearchWindow {
    pub const MIN_SIZE: f64 = 4.0;

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn centered(center: PixelPoint, size: f64) -> Self {
        Self::new(center.u, center.v, size, size)
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(self.cx, self.cy)
    }

    /// Integer pixel rectangle covered by the window, clipped to the frame.
    /// `None` when nothing of the window lies inside.
    pub fn clip(&self, width: u32, height: u32) -> Option<PixelRect> {
        let x0 = (self.cx - self.w / 2.0).round().max(0.0);
        let y0 = (self.cy - self.h / 2.0).round().max(0.0);
        let x1 = (self.cx + self.w / 2.0).round().min(width as f64);
        let y1 = (self.cy + self.h / 2.0).round().min(height as f64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(PixelRect {
            x0: x0 as u32,
            y0: y0 as u32,
            width: (x1 - x0) as u32,
            height: (y1 - y0) as u32,
        })
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        (p.u - self.cx).abs() <= self.w / 2.0 && (p.v - self.cy).abs() <= self.h / 2.0
    }

    pub fn overlaps(&self, other: &SearchWindow) -> bool {
        (self.cx - other.cx).abs() * 2.0 < self.w + other.w
            && (self.cy - other.cy).abs() * 2.0 < self.h + other.h
    }

    /// Clamps the size to `[MIN_SIZE, frame]` and the centre into the frame.
    pub fn clamped(mut self, width: u32, height: u32) -> Self {
        self.w = self.w.clamp(Self::MIN_SIZE, (width as f64).max(Self::MIN_SIZE));
        self.h = self.h.clamp(Self::MIN_SIZE, (height as f64).max(Self::MIN_SIZE));
        self.cx = self.cx.clamp(0.0, width as f64 - 1.0);
        self.cy = self.cy.clamp(0.0, height as f64 - 1.0);
        self
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}
