//! Camshift tracking of LED regions with a Kalman filter whose measurement
//! noise follows the Bhattacharyya similarity of each new observation.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{connected_components, fit_disk, Component};
use crate::codec::SIGNAL_FLOOR;
use crate::types::{Frame, LedId, PixelPoint, PixelRect, SearchWindow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("search window holds no probability mass")]
    NoMass,
    #[error("covariance is not symmetric positive semi-definite")]
    StateCorruption,
    #[error("histogram has no mass")]
    EmptyHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub bins: usize,
    /// Mean-shift convergence distance (px).
    pub eps: f64,
    pub max_iter: u32,
    pub bc_threshold: f64,
    /// Number of 1.5x window expansions tried during recovery.
    pub expansion_cap: u32,
    pub expansion_factor: f64,
    /// Frames a lamp may stay occluded before it is declared lost.
    pub patience: u32,
    /// Grey level for blob detection.
    pub detect_threshold: u8,
    /// Process noise intensity (px^2 / frame^3).
    pub q: f64,
    /// Measurement noise at perfect similarity (px^2).
    pub r0: f64,
    /// Weight of each accepted observation in the running target model.
    pub model_adapt: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            eps: 1.0,
            max_iter: 10,
            bc_threshold: 0.6,
            expansion_cap: 4,
            expansion_factor: 1.5,
            patience: 15,
            detect_threshold: 40,
            q: 0.05,
            r0: 0.25,
            model_adapt: 0.1,
        }
    }
}

/// Normalised intensity histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub bins: Vec<f64>,
}

impl TargetModel {
    pub fn from_counts(counts: &[f64]) -> Result<Self, TrackError> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) || counts.iter().any(|&c| c < 0.0) {
            return Err(TrackError::EmptyHistogram);
        }
        Ok(Self { bins: counts.iter().map(|c| c / total).collect() })
    }

    pub fn uniform(n: usize) -> Self {
        Self { bins: vec![1.0 / n as f64; n] }
    }

    pub fn delta(n: usize, k: usize) -> Self {
        let mut bins = vec![0.0; n];
        bins[k] = 1.0;
        Self { bins }
    }

    /// Histogram of lit pixels (outside the darkest bin) in `window`,
    /// ignoring pixels inside any `mask` window. Counts are smoothed with a
    /// [1, 2, 1] kernel so sparse grey levels between stripes compare stably.
    pub fn from_window(
        frame: &Frame,
        window: &SearchWindow,
        bins: usize,
        mask: &[SearchWindow],
    ) -> Result<Self, TrackError> {
        let rect = window.clip(frame.width, frame.height).ok_or(TrackError::EmptyHistogram)?;
        let mut counts = vec![0.0; bins];
        for y in rect.y0..rect.y1() {
            let row = frame.row(y);
            for x in rect.x0..rect.x1() {
                let b = bin_of(row[x as usize], bins);
                if b == 0 || masked(mask, x, y) {
                    continue;
                }
                counts[b] += 1.0;
            }
        }
        let mut smooth: Vec<f64> = (0..bins)
            .map(|i| {
                let l = if i > 0 { counts[i - 1] } else { 0.0 };
                let r = counts.get(i + 1).copied().unwrap_or(0.0);
                l + 2.0 * counts[i] + r
            })
            .collect();
        smooth[0] = 0.0;
        Self::from_counts(&smooth)
    }

    /// Moves the model towards `obs` by `alpha`.
    pub fn blend(&mut self, obs: &TargetModel, alpha: f64) {
        for (m, o) in self.bins.iter_mut().zip(&obs.bins) {
            *m = (1.0 - alpha) * *m + alpha * o;
        }
        let total: f64 = self.bins.iter().sum();
        self.bins.iter_mut().for_each(|m| *m /= total);
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

#[inline]
fn bin_of(v: u8, bins: usize) -> usize {
    v as usize * bins / 256
}

fn masked(mask: &[SearchWindow], x: u32, y: u32) -> bool {
    let p = PixelPoint::new(x as f64, y as f64);
    mask.iter().any(|m| m.contains(p))
}

/// Similarity `sum sqrt(p q)` of two histograms, in `[0, 1]`.
pub fn bhattacharyya(a: &TargetModel, b: &TargetModel) -> f64 {
    assert_eq!(a.len(), b.len(), "histograms must have the same bins");
    let s: f64 = a.bins.iter().zip(&b.bins).map(|(p, q)| (p * q).sqrt()).sum();
    s.clamp(0.0, 1.0)
}

/// Per-pixel target likelihood over a region of the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[((y - self.y0) * self.width + (x - self.x0)) as usize]
    }

    fn rect(&self) -> PixelRect {
        PixelRect { x0: self.x0, y0: self.y0, width: self.width, height: self.height }
    }
}

/// Weight of each pixel: its bin value scaled so the model's peak bin maps
/// to one.
pub fn backproject(frame: &Frame, model: &TargetModel) -> ProbMap {
    let all = PixelRect { x0: 0, y0: 0, width: frame.width, height: frame.height };
    backproject_rect(frame, model, &all, &[])
}

pub fn backproject_rect(frame: &Frame, model: &TargetModel, rect: &PixelRect, mask: &[SearchWindow]) -> ProbMap {
    let peak = model.bins.iter().cloned().fold(0.0, f64::max);
    let lut: Vec<f32> = (0..=255u8)
        .map(|v| if peak > 0.0 { (model.bins[bin_of(v, model.len())] / peak) as f32 } else { 0.0 })
        .collect();
    let mut data = Vec::with_capacity(rect.area() as usize);
    for y in rect.y0..rect.y1() {
        let row = frame.row(y);
        for x in rect.x0..rect.x1() {
            let w = if masked(mask, x, y) { 0.0 } else { lut[row[x as usize] as usize] };
            data.push(w);
        }
    }
    ProbMap { x0: rect.x0, y0: rect.y0, width: rect.width, height: rect.height, data }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShift {
    pub window: SearchWindow,
    pub iterations: u32,
    pub converged: bool,
    /// Last shift applied to the window centre.
    pub last_shift: f64,
    /// Zeroth moment of the map inside the final window.
    pub m00: f64,
}

fn intersect(a: &PixelRect, b: &PixelRect) -> Option<PixelRect> {
    let x0 = a.x0.max(b.x0);
    let y0 = a.y0.max(b.y0);
    let x1 = a.x1().min(b.x1());
    let y1 = a.y1().min(b.y1());
    (x1 > x0 && y1 > y0).then(|| PixelRect { x0, y0, width: x1 - x0, height: y1 - y0 })
}

fn moments(map: &ProbMap, window: &SearchWindow) -> (f64, f64, f64) {
    let frame_rect = PixelRect { x0: 0, y0: 0, width: map.x0 + map.width, height: map.y0 + map.height };
    let Some(rect) = window
        .clip(frame_rect.width, frame_rect.height)
        .and_then(|r| intersect(&r, &map.rect()))
    else {
        return (0.0, 0.0, 0.0);
    };
    let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
    for y in rect.y0..rect.y1() {
        for x in rect.x0..rect.x1() {
            let w = map.get(x, y) as f64;
            m00 += w;
            m10 += w * x as f64;
            m01 += w * y as f64;
        }
    }
    (m00, m10, m01)
}

/// Moves the window onto the weighted centroid of `map` until the step is
/// below `eps` or `max_iter` steps were taken.
pub fn meanshift_iterate(
    map: &ProbMap,
    w0: SearchWindow,
    eps: f64,
    max_iter: u32,
) -> Result<MeanShift, TrackError> {
    let mut window = w0;
    let mut last_shift = f64::INFINITY;
    let mut m00 = 0.0;
    for it in 1..=max_iter.max(1) {
        let (m, m10, m01) = moments(map, &window);
        if m <= 0.0 {
            return Err(TrackError::NoMass);
        }
        m00 = m;
        let (nx, ny) = (m10 / m, m01 / m);
        last_shift = (nx - window.cx).hypot(ny - window.cy);
        window.cx = nx;
        window.cy = ny;
        if last_shift < eps {
            return Ok(MeanShift { window, iterations: it, converged: true, last_shift, m00 });
        }
    }
    Ok(MeanShift { window, iterations: max_iter.max(1), converged: false, last_shift, m00 })
}

/// Mean shift followed by the zeroth-moment resize `w = h = 2 sqrt(M00)`.
pub fn camshift(
    map: &ProbMap,
    w0: SearchWindow,
    eps: f64,
    max_iter: u32,
    frame_size: (u32, u32),
) -> Result<MeanShift, TrackError> {
    let mut ms = meanshift_iterate(map, w0, eps, max_iter)?;
    let side = 2.0 * ms.m00.sqrt();
    ms.window.w = side;
    ms.window.h = side;
    ms.window = ms.window.clamped(frame_size.0, frame_size.1);
    Ok(ms)
}

/// Constant-velocity Kalman filter over `(x, y, vx, vy)` in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub state: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub q: f64,
    pub r0: f64,
}

impl KalmanState {
    pub fn new(x: f64, y: f64, q: f64, r0: f64) -> Self {
        Self {
            state: Vector4::new(x, y, 0.0, 0.0),
            p: Matrix4::from_diagonal(&Vector4::new(r0, r0, 4.0, 4.0)),
            q,
            r0,
        }
    }

    pub fn position(&self) -> PixelPoint {
        PixelPoint::new(self.state[0], self.state[1])
    }

    fn transition() -> Matrix4<f64> {
        Matrix4::new(
            1.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, 1.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    fn process_noise(&self) -> Matrix4<f64> {
        let q = self.q;
        Matrix4::new(
            q / 4.0, 0.0, q / 2.0, 0.0, //
            0.0, q / 4.0, 0.0, q / 2.0, //
            q / 2.0, 0.0, q, 0.0, //
            0.0, q / 2.0, 0.0, q,
        )
    }

    /// Whether the covariance is symmetric PSD within round-off.
    pub fn is_psd(&self) -> bool {
        let scale = self.p.abs().max().max(1.0);
        let tol = 1e-9 * scale;
        if !self.p.iter().all(|v| v.is_finite()) {
            return false;
        }
        if (self.p - self.p.transpose()).abs().max() > tol {
            return false;
        }
        self.p.symmetric_eigenvalues().min() >= -tol
    }

    pub fn predict(&self) -> Result<Self, TrackError> {
        if !self.is_psd() {
            return Err(TrackError::StateCorruption);
        }
        let f = Self::transition();
        let p = f * self.p * f.transpose() + self.process_noise();
        Ok(Self { state: f * self.state, p: symmetrize(p), ..self.clone() })
    }
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Measurement noise scale `1 / max(bc^2, 1e-3)`.
pub fn noise_gain(bc: f64) -> f64 {
    1.0 / (bc * bc).max(1e-3)
}

/// One predict/correct cycle. The measurement noise grows as the
/// similarity `bc` of the observation falls.
pub fn kalman_step(ks: &KalmanState, measurement: (f64, f64), bc: f64) -> Result<KalmanState, TrackError> {
    let pred = ks.predict()?;
    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let r = Matrix2::identity() * (ks.r0 * noise_gain(bc.clamp(0.0, 1.0)));
    let s = h * pred.p * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(TrackError::StateCorruption)?;
    let k: Matrix4x2<f64> = pred.p * h.transpose() * s_inv;
    let z = Vector2::new(measurement.0, measurement.1);
    let state = pred.state + k * (z - h * pred.state);
    let i_kh = Matrix4::identity() - k * h;
    let p = i_kh * pred.p * i_kh.transpose() + k * r * k.transpose();
    Ok(KalmanState { state, p: symmetrize(p), ..pred })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrackStatus {
    Tracking,
    Occluded,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedLamp {
    pub window: SearchWindow,
    pub model: TargetModel,
    pub kalman: KalmanState,
    pub id: Option<LedId>,
    pub status: TrackStatus,
    pub last_bc: f64,
    /// Disk centre measured in the latest frame, if the lamp was seen.
    pub measurement: Option<PixelPoint>,
    pub radius: f64,
    pub missed_frames: u32,
}

impl TrackedLamp {
    /// Starts tracking a detected blob.
    pub fn from_blob(frame: &Frame, blob: &Blob, cfg: &TrackerConfig) -> Result<Self, TrackError> {
        let model = TargetModel::from_window(frame, &blob.window, cfg.bins, &[])?;
        Ok(Self {
            window: blob.window,
            model,
            kalman: KalmanState::new(blob.center.u, blob.center.v, cfg.q, cfg.r0),
            id: None,
            status: TrackStatus::Tracking,
            last_bc: 1.0,
            measurement: Some(blob.center),
            radius: blob.radius,
            missed_frames: 0,
        })
    }

    pub fn position(&self) -> PixelPoint {
        self.kalman.position()
    }

    pub fn is_active(&self) -> bool {
        self.status != TrackStatus::Lost
    }
}

/// A bright region found by full-frame detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub window: SearchWindow,
    pub center: PixelPoint,
    pub radius: f64,
    pub area: u64,
}

/// Merges stripe fragments of one lamp: components whose column ranges
/// overlap and whose vertical gap is at most the wider of the two.
fn merge_stripes(mut comps: Vec<Component>) -> Vec<Component> {
    loop {
        let mut merged = false;
        'outer: for i in 0..comps.len() {
            for j in (i + 1)..comps.len() {
                let (a, b) = (&comps[i], &comps[j]);
                let cols = a.min_x <= b.max_x && b.min_x <= a.max_x;
                let gap = if a.max_y < b.min_y {
                    b.min_y - a.max_y
                } else if b.max_y < a.min_y {
                    a.min_y - b.max_y
                } else {
                    0
                };
                if cols && gap <= a.width().max(b.width()) {
                    let b = comps.swap_remove(j);
                    comps[i].merge(&b);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            return comps;
        }
    }
}

/// Finds LED candidates: thresholded 8-connected components, stripe
/// fragments merged, border-touching and non-round regions rejected.
pub fn detect_blobs(frame: &Frame, cfg: &TrackerConfig) -> Vec<Blob> {
    let comps = merge_stripes(connected_components(frame, cfg.detect_threshold));
    let mut blobs: Vec<Blob> = comps
        .iter()
        .filter(|c| {
            let touches = c.min_x == 0
                || c.min_y == 0
                || c.max_x + 1 >= frame.width
                || c.max_y + 1 >= frame.height;
            let (w, h) = (c.width() as f64, c.height() as f64);
            let aspect = w.max(h) / w.min(h);
            let fill = c.area as f64 / (w * h);
            !touches && c.area >= 4 && aspect <= 2.5 && fill >= 0.15
        })
        .filter_map(|c| {
            let r = c.bbox();
            let pad = PixelRect {
                x0: r.x0.saturating_sub(2),
                y0: r.y0.saturating_sub(2),
                width: (r.width + 4).min(frame.width - r.x0.saturating_sub(2)),
                height: (r.height + 4).min(frame.height - r.y0.saturating_sub(2)),
            };
            let fit = fit_disk(frame, &pad, SIGNAL_FLOOR)?;
            let radius = fit.radius.max(c.width() as f64 / 2.0);
            let center = PixelPoint::new(fit.cx, fit.cy);
            // A dark stripe on the frame edge can hide that the disk is cut.
            let slack = 0.5;
            let inside = center.u - radius >= -slack
                && center.v - radius >= -slack
                && center.u + radius <= frame.width as f64 - 1.0 + slack
                && center.v + radius <= frame.height as f64 - 1.0 + slack;
            if !inside {
                return None;
            }
            Some(Blob {
                window: SearchWindow::centered(center, 2.0 * radius + 4.0),
                center,
                radius,
                area: c.area,
            })
        })
        .collect();
    blobs.sort_by(|a, b| a.center.v.total_cmp(&b.center.v).then(a.center.u.total_cmp(&b.center.u)));
    blobs
}

/// Candidate LED windows in the frame.
pub fn detect_rois(frame: &Frame, cfg: &TrackerConfig) -> Vec<SearchWindow> {
    detect_blobs(frame, cfg).into_iter().map(|b| b.window).collect()
}

/// Observation of a lamp inside a window: disk fit plus its similarity to the
/// lamp's model.
struct Observation {
    center: PixelPoint,
    radius: f64,
    bc: f64,
    hist: Option<TargetModel>,
}

fn observe(
    frame: &Frame,
    lamp: &TrackedLamp,
    start: SearchWindow,
    cfg: &TrackerConfig,
    mask: &[SearchWindow],
) -> Option<Observation> {
    let rect = start.clip(frame.width, frame.height)?;
    let map = backproject_rect(frame, &lamp.model, &rect, mask);
    let ms = meanshift_iterate(&map, start, cfg.eps, cfg.max_iter).ok()?;
    // Refine on the disk itself, with margin for a partially covered lamp.
    let side = (2.0 * lamp.radius + 4.0).max(ms.window.w).max(ms.window.h) * 1.25;
    let look = SearchWindow::centered(ms.window.center(), side);
    let look_rect = look.clip(frame.width, frame.height)?;
    let (center, radius) = match fit_disk(frame, &look_rect, SIGNAL_FLOOR) {
        Some(fit) if look.contains(PixelPoint::new(fit.cx, fit.cy)) => {
            (PixelPoint::new(fit.cx, fit.cy), fit.radius)
        }
        _ => (ms.window.center(), lamp.radius),
    };
    let window = SearchWindow::centered(center, 2.0 * radius + 4.0);
    let hist = TargetModel::from_window(frame, &window, cfg.bins, mask).ok();
    let bc = hist.as_ref().map(|h| bhattacharyya(&lamp.model, h)).unwrap_or(0.0);
    Some(Observation { center, radius, bc, hist })
}

fn similarity(frame: &Frame, model: &TargetModel, window: &SearchWindow, cfg: &TrackerConfig, mask: &[SearchWindow]) -> f64 {
    TargetModel::from_window(frame, window, cfg.bins, mask)
        .map(|h| bhattacharyya(model, &h))
        .unwrap_or(0.0)
}

/// Searches the eight neighbouring window placements, then successively
/// enlarged windows, for a region resembling the lamp's model. Regions inside
/// `mask` (other lamps) are ignored.
pub fn recover(frame: &Frame, lamp: &TrackedLamp, cfg: &TrackerConfig, mask: &[SearchWindow]) -> TrackedLamp {
    let mut out = lamp.clone();
    let mut base = lamp.window;
    for _ in 0..=cfg.expansion_cap {
        let mut best: Option<(f64, SearchWindow)> = None;
        for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
            let cand = SearchWindow::new(
                base.cx + dx as f64 * base.w,
                base.cy + dy as f64 * base.h,
                base.w,
                base.h,
            );
            if cand.clip(frame.width, frame.height).is_none() {
                continue;
            }
            let bc = similarity(frame, &lamp.model, &cand, cfg, mask);
            if best.is_none_or(|(b, _)| bc > b) {
                best = Some((bc, cand));
            }
        }
        if let Some((bc, cand)) = best.filter(|(bc, _)| *bc >= cfg.bc_threshold) {
            let _ = bc;
            if let Some(obs) = observe(frame, lamp, cand, cfg, mask).filter(|o| o.bc >= cfg.bc_threshold) {
                out.kalman = KalmanState::new(obs.center.u, obs.center.v, cfg.q, cfg.r0);
                out.window = SearchWindow::centered(obs.center, 2.0 * obs.radius + 4.0);
                out.radius = obs.radius;
                out.measurement = Some(obs.center);
                out.last_bc = obs.bc;
                out.status = TrackStatus::Tracking;
                out.missed_frames = 0;
                return out;
            }
        }
        base.w = (base.w * cfg.expansion_factor).min(frame.width as f64);
        base.h = (base.h * cfg.expansion_factor).min(frame.height as f64);
    }
    out.status = TrackStatus::Lost;
    out
}

/// Advances every active lamp by one frame and reports blobs no window
/// covers.
pub fn track_frame(
    lamps: Vec<TrackedLamp>,
    frame: &Frame,
    cfg: &TrackerConfig,
) -> Result<(Vec<TrackedLamp>, Vec<Blob>), TrackError> {
    let mut out: Vec<TrackedLamp> = Vec::with_capacity(lamps.len());
    for i in 0..lamps.len() {
        let lamp = &lamps[i];
        if !lamp.is_active() {
            out.push(lamp.clone());
            continue;
        }
        // Other lamps' latest windows, already updated ones first.
        let mask: Vec<SearchWindow> = out
            .iter()
            .chain(lamps[i + 1..].iter())
            .filter(|l| l.is_active())
            .map(|l| l.window)
            .collect();
        let pred = lamp.kalman.predict()?;
        let start = SearchWindow::new(pred.state[0], pred.state[1], lamp.window.w, lamp.window.h)
            .clamped(frame.width, frame.height);
        let mut next = lamp.clone();
        match observe(frame, lamp, start, cfg, &mask) {
            Some(obs) if obs.bc >= cfg.bc_threshold => {
                next.kalman = kalman_step(&lamp.kalman, (obs.center.u, obs.center.v), obs.bc)?;
                next.radius = obs.radius;
                next.window = SearchWindow::centered(next.kalman.position(), 2.0 * obs.radius + 4.0);
                next.measurement = Some(obs.center);
                next.last_bc = obs.bc;
                next.status = TrackStatus::Tracking;
                next.missed_frames = 0;
                if let Some(h) = &obs.hist {
                    next.model.blend(h, cfg.model_adapt);
                }
            }
            _ => {
                let probe = TrackedLamp { window: start, ..lamp.clone() };
                let rec = recover(frame, &probe, cfg, &mask);
                if rec.status == TrackStatus::Tracking {
                    next = rec;
                } else {
                    next.kalman = pred;
                    next.window = start;
                    next.measurement = None;
                    next.last_bc = 0.0;
                    next.missed_frames += 1;
                    next.status = if next.missed_frames > cfg.patience {
                        TrackStatus::Lost
                    } else {
                        TrackStatus::Occluded
                    };
                }
            }
        }
        out.push(next);
    }
    let covered: Vec<SearchWindow> = out.iter().filter(|l| l.is_active()).map(|l| l.window).collect();
    let fresh = detect_blobs(frame, cfg)
        .into_iter()
        .filter(|b| !covered.iter().any(|w| w.contains(b.center)))
        .collect();
    Ok((out, fresh))
}
