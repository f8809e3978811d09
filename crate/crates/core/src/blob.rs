//! Low-level raster helpers: Otsu thresholding, connected components and a
//! row-chord disk fit that tolerates stripe gaps.

use crate::types::{Frame, PixelRect};

/// Otsu split on a 256-bin histogram. Returns the largest level of the dark
/// class, or `None` when the histogram holds fewer than two distinct levels.
pub fn otsu_split(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(k, &c)| k as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let mut best: Option<(f64, u8)> = None;
    for k in 0..255usize {
        w0 += hist[k];
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, k as u8));
        }
    }
    best.map(|(_, k)| k)
}

/// Means of the two classes either side of `split`.
pub fn class_means(hist: &[u64; 256], split: u8) -> (f64, f64) {
    let mean = |range: std::ops::RangeInclusive<usize>| {
        let (mut n, mut s) = (0u64, 0.0);
        for k in range {
            n += hist[k];
            s += k as f64 * hist[k] as f64;
        }
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    };
    (mean(0..=split as usize), mean(split as usize + 1..=255))
}

/// Summary of one 8-connected region of pixels at or above a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub min_x: u32,
    pub max_x: u32,
    pub min_y: u32,
    pub max_y: u32,
    pub area: u64,
    /// Intensity-weighted sums for the centroid.
    pub mass: f64,
    pub sum_x: f64,
    pub sum_y: f64,
}

impl Component {
    fn seed(x: u32, y: u32) -> Self {
        Self {
            min_x: x,
            max_x: x,
            min_y: y,
            max_y: y,
            area: 0,
            mass: 0.0,
            sum_x: 0.0,
            sum_y: 0.0,
        }
    }

    fn add(&mut self, x: u32, y: u32, v: u8) {
        self.min_x = self.min_x.min(x);
        self.max_x = self.max_x.max(x);
        self.min_y = self.min_y.min(y);
        self.max_y = self.max_y.max(y);
        self.area += 1;
        let w = v as f64;
        self.mass += w;
        self.sum_x += w * x as f64;
        self.sum_y += w * y as f64;
    }

    /// Absorbs another component.
    pub fn merge(&mut self, o: &Component) {
        self.min_x = self.min_x.min(o.min_x);
        self.max_x = self.max_x.max(o.max_x);
        self.min_y = self.min_y.min(o.min_y);
        self.max_y = self.max_y.max(o.max_y);
        self.area += o.area;
        self.mass += o.mass;
        self.sum_x += o.sum_x;
        self.sum_y += o.sum_y;
    }

    pub fn width(&self) -> u32 {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> u32 {
        self.max_y - self.min_y + 1
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.sum_x / self.mass, self.sum_y / self.mass)
    }

    pub fn bbox(&self) -> PixelRect {
        PixelRect {
            x0: self.min_x,
            y0: self.min_y,
            width: self.width(),
            height: self.height(),
        }
    }
}

/// Labels 8-connected regions with value `>= threshold`, in raster order of
/// their first pixel.
pub fn connected_components(frame: &Frame, threshold: u8) -> Vec<Component> {
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || frame.pixels[start] < threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Component::seed((start % w) as u32, (start / w) as u32);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            comp.add(x as u32, y as u32, frame.pixels[idx]);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let n = ny * w + nx;
                    if !seen[n] && frame.pixels[n] >= threshold {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Circle recovered from a striped disk, in frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskFit {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Fits a circle to a bright disk inside `rect` from its horizontal chords.
///
/// Each row whose peak reaches `floor` contributes the chord of pixels at or
/// above half that peak. Dark stripe rows simply drop out, so the fit works on
/// any subset of rows. The outermost lit rows are ignored because their
/// partial coverage shortens the half-peak chord.
pub fn fit_disk(frame: &Frame, rect: &PixelRect, floor: u8) -> Option<DiskFit> {
    struct Chord {
        y: f64,
        mid: f64,
        half: f64,
    }
    let mut chords = Vec::new();
    for y in rect.y0..rect.y1() {
        let row = &frame.row(y)[rect.x0 as usize..rect.x1() as usize];
        let peak = *row.iter().max().unwrap_or(&0);
        if peak < floor {
            continue;
        }
        let cut = (peak as f64 / 2.0).ceil() as u8;
        let first = row.iter().position(|&v| v >= cut)?;
        let last = row.iter().rposition(|&v| v >= cut)?;
        chords.push(Chord {
            y: y as f64,
            mid: rect.x0 as f64 + (first + last) as f64 / 2.0,
            half: (last - first + 1) as f64 / 2.0,
        });
    }
    if chords.is_empty() {
        return None;
    }
    let cx = chords.iter().map(|c| c.mid).sum::<f64>() / chords.len() as f64;
    let (top, bottom) = (chords[0].y, chords[chords.len() - 1].y);
    let inner: Vec<&Chord> = if chords.len() > 4 {
        chords.iter().filter(|c| c.y != top && c.y != bottom).collect()
    } else {
        chords.iter().collect()
    };
    let fallback = || {
        let half = inner.iter().map(|c| c.half).fold(0.0, f64::max);
        DiskFit { cx, cy: (top + bottom) / 2.0, radius: half.max((bottom - top + 1.0) / 2.0) }
    };
    // Solve half^2 + y^2 = 2 cy y + c in least squares.
    let n = inner.len() as f64;
    let (mut sy, mut syy, mut sb, mut syb) = (0.0, 0.0, 0.0, 0.0);
    for c in &inner {
        let b = c.half * c.half + c.y * c.y;
        sy += c.y;
        syy += c.y * c.y;
        sb += b;
        syb += c.y * b;
    }
    let det = n * syy - sy * sy;
    if inner.len() < 3 || det.abs() < 1e-9 * n * n {
        return Some(fallback());
    }
    let slope = (n * syb - sy * sb) / det;
    let c0 = (sb - slope * sy) / n;
    let cy = slope / 2.0;
    let r2 = c0 + cy * cy;
    let span_ok = cy >= top - 1.0 && cy <= bottom + 1.0;
    if !(r2 > 0.0) || !span_ok {
        return Some(fallback());
    }
    Some(DiskFit { cx, cy, radius: r2.sqrt() })
}
