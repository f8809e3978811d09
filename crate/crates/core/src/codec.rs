//! LED-ID stripe codes: PWM waveforms, rolling-shutter stripe synthesis,
//! feature extraction and database matching.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{class_means, fit_disk, otsu_split};
use crate::types::{Frame, LedId, SearchWindow, WorldPoint};

/// Peak brightness below which a region is treated as unlit.
pub const SIGNAL_FLOOR: u8 = 20;
/// Smallest bright/dark contrast (grey levels) still read as stripes.
pub const MIN_STRIPE_CONTRAST: f64 = 12.0;
/// Hysteresis band around the stripe threshold, as a fraction of contrast.
const HYSTERESIS: f64 = 0.15;
/// Allowed relative deviation of measured band widths and spacing.
const SPACING_TOLERANCE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid modulation profile: {0}")]
    InvalidProfile(&'static str),
    #[error("stripes of a {frequency_hz} Hz source cannot be resolved at this row timing")]
    Unresolvable { frequency_hz: f64 },
    #[error("region of interest holds no signal")]
    NoSignal,
    #[error("region of interest lies outside the frame")]
    OutOfBounds,
    #[error("no luminaire matches the measured features")]
    NoMatch,
    #[error("features match several luminaires: {0:?}")]
    Ambiguous(Vec<LedId>),
    #[error("duplicate luminaire id {0}")]
    DuplicateId(LedId),
    #[error("luminaires {0} and {1} cannot be told apart")]
    Collision(LedId, LedId),
    #[error("unsupported database version {0}")]
    UnsupportedVersion(u32),
    #[error("database file: {0}")]
    Io(#[from] std::io::Error),
    #[error("database format: {0}")]
    Json(#[from] serde_json::Error),
}

/// How a luminaire drives its LED.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationProfile {
    pub frequency_hz: f64,
    /// On fraction of each period, in `(0, 1]`.
    pub duty_cycle: f64,
    /// Offset of the pulse start within the period, in `[0, 1)`.
    pub phase: f64,
    /// A Manchester line code doubles the transition rate.
    pub manchester: bool,
}

impl ModulationProfile {
    pub fn new(frequency_hz: f64, duty_cycle: f64, phase: f64) -> Result<Self, CodecError> {
        let p = Self { frequency_hz, duty_cycle, phase, manchester: false };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return Err(CodecError::InvalidProfile("frequency must be positive"));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(CodecError::InvalidProfile("duty cycle must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.phase) {
            return Err(CodecError::InvalidProfile("phase must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Pulse rate seen by the sensor.
    pub fn effective_frequency(&self) -> f64 {
        if self.manchester {
            2.0 * self.frequency_hz
        } else {
            self.frequency_hz
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.effective_frequency()
    }
}

/// Light output over time, normalised so a fully lit interval integrates to
/// its length.
pub trait Waveform {
    /// Time the LED is on within `[a, b]`.
    fn on_time(&self, a: f64, b: f64) -> f64;

    /// Mean level seen by a row exposed over `[t, t + exposure]`.
    fn level(&self, t: f64, exposure: f64) -> f64 {
        (self.on_time(t, t + exposure) / exposure).clamp(0.0, 1.0)
    }
}

/// Ideal PWM square wave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwmWave {
    period: f64,
    width: f64,
    offset: f64,
}

impl PwmWave {
    pub fn new(profile: &ModulationProfile) -> Self {
        let period = profile.period();
        Self { period, width: profile.duty_cycle * period, offset: profile.phase * period }
    }

    /// On time accumulated over `[offset, t]`.
    fn cumulative(&self, t: f64) -> f64 {
        let s = t - self.offset;
        let k = (s / self.period).floor();
        let rem = s - k * self.period;
        k * self.width + rem.clamp(0.0, self.width)
    }
}

impl Waveform for PwmWave {
    fn on_time(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        if self.width >= self.period {
            return b - a;
        }
        self.cumulative(b) - self.cumulative(a)
    }
}

/// PWM pulse train whose pulses are displaced by independent Gaussian
/// offsets. Widths are preserved, so only stripe positions jitter.
#[derive(Debug, Clone)]
pub struct JitteredPulseTrain {
    period: f64,
    width: f64,
    offset: f64,
    first: i64,
    shifts: Vec<f64>,
    reach: i64,
}

impl JitteredPulseTrain {
    /// Draws offsets for every pulse that can touch `[t_start, t_end]`.
    pub fn new<R: Rng + ?Sized>(
        profile: &ModulationProfile,
        sigma_s: f64,
        t_start: f64,
        t_end: f64,
        rng: &mut R,
    ) -> Self {
        let base = PwmWave::new(profile);
        let reach = (6.0 * sigma_s / base.period).ceil() as i64 + 1;
        let first = ((t_start - base.offset) / base.period).floor() as i64 - reach;
        let last = ((t_end - base.offset) / base.period).ceil() as i64 + reach;
        let shifts = match Normal::new(0.0, sigma_s.max(0.0)) {
            Ok(n) if sigma_s > 0.0 => (first..=last).map(|_| n.sample(rng)).collect(),
            _ => vec![0.0; (last - first + 1) as usize],
        };
        Self { period: base.period, width: base.width, offset: base.offset, first, shifts, reach }
    }
}

impl Waveform for JitteredPulseTrain {
    fn on_time(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        if self.width >= self.period {
            return b - a;
        }
        let k_lo = ((a - self.offset - self.width) / self.period).floor() as i64 - self.reach;
        let k_hi = ((b - self.offset) / self.period).ceil() as i64 + self.reach;
        let mut total = 0.0;
        for k in k_lo..=k_hi {
            let idx = k - self.first;
            let shift = if idx >= 0 && (idx as usize) < self.shifts.len() {
                self.shifts[idx as usize]
            } else {
                0.0
            };
            let start = self.offset + k as f64 * self.period + shift;
            let end = start + self.width;
            total += (end.min(b) - start.max(a)).max(0.0);
        }
        total.min(b - a)
    }
}

/// Rolling-shutter timing shared by synthesis and extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowTiming {
    /// Readout delay between consecutive native sensor rows (s).
    pub t_row: f64,
    /// Exposure of each row (s).
    pub t_exp: f64,
    pub native_rows: u32,
    pub working_rows: u32,
}

impl RowTiming {
    pub const DEFAULT_T_ROW: f64 = 25e-6;
    pub const DEFAULT_T_EXP: f64 = 20e-6;

    pub fn native() -> Self {
        Self {
            t_row: Self::DEFAULT_T_ROW,
            t_exp: Self::DEFAULT_T_EXP,
            native_rows: 1536,
            working_rows: 1536,
        }
    }

    pub fn compressed() -> Self {
        Self { working_rows: 600, ..Self::native() }
    }

    pub fn scale(&self) -> f64 {
        self.native_rows as f64 / self.working_rows as f64
    }

    /// Readout delay between consecutive working rows.
    pub fn effective_row_time(&self) -> f64 {
        self.t_row * self.scale()
    }

    /// Native sensor row sampled by a working row under nearest-neighbour
    /// downscaling.
    pub fn native_row(&self, working_row: u32) -> u32 {
        (working_row as u64 * self.native_rows as u64 / self.working_rows as u64) as u32
    }

    /// Exposure start of a working row for a frame starting at `t0`.
    pub fn row_time(&self, t0: f64, working_row: u32) -> f64 {
        t0 + self.native_row(working_row) as f64 * self.t_row
    }
}

/// Measurable signature of a striped LED region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeFeatures {
    /// Bright bands in the region, partial bands included.
    pub stripe_count: u32,
    /// Pixels above the stripe threshold.
    pub roi_area: f64,
    /// Bright band width over the full period.
    pub bright_ratio: f64,
    /// Bright band centre as a fraction of the period, when measurable.
    pub phase_coefficient: Option<f64>,
    /// Diameter of the lit disk in working rows.
    pub roi_rows: f64,
    /// Exposure start times (s) at the centres of complete bright bands.
    pub band_centers: Vec<f64>,
    /// Mean duration (s) of complete bright bands.
    pub bright_width: Option<f64>,
    /// Mean duration (s) of complete dark gaps.
    pub dark_width: Option<f64>,
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Distance between two fractions on the unit circle.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = frac(a - b);
    d.min(1.0 - d)
}

/// Circular mean of `frac(t * f)` over `times`.
pub fn mean_phase(times: &[f64], frequency_hz: f64) -> Option<f64> {
    if times.is_empty() {
        return None;
    }
    let (mut s, mut c) = (0.0, 0.0);
    for &t in times {
        let a = TAU * frac(t * frequency_hz);
        s += a.sin();
        c += a.cos();
    }
    if s.hypot(c) < 1e-9 {
        return None;
    }
    Some(frac((s.atan2(c) + TAU) / TAU))
}

/// Analytic features of a profile seen through `timing` in a disk spanning
/// `roi_rows` working rows.
pub fn expected_features(
    profile: &ModulationProfile,
    timing: &RowTiming,
    roi_rows: f64,
) -> Result<StripeFeatures, CodecError> {
    let disk_area = PI * (roi_rows / 2.0).powi(2);
    if profile.duty_cycle >= 1.0 {
        return Ok(StripeFeatures {
            stripe_count: 1,
            roi_area: disk_area,
            bright_ratio: 1.0,
            phase_coefficient: None,
            roi_rows,
            band_centers: Vec::new(),
            bright_width: None,
            dark_width: None,
        });
    }
    let f = profile.effective_frequency();
    let t = 1.0 / f;
    let unresolvable = CodecError::Unresolvable { frequency_hz: f };
    // Fewer than two working rows per period aliases the stripes.
    if f * timing.effective_row_time() >= 0.5 {
        return Err(unresolvable);
    }
    // An exposure spanning whole periods integrates the stripes away.
    let r = timing.t_exp % t;
    if r < 1e-9 * t || t - r < 1e-9 * t {
        return Err(unresolvable);
    }
    let on = profile.duty_cycle * t;
    let off = t - on;
    let bright_ratio = if r <= on.min(off) {
        profile.duty_cycle
    } else if r <= off {
        r / t
    } else if r <= on {
        1.0 - r / t
    } else {
        1.0 - profile.duty_cycle
    };
    let stripe_count = (roi_rows * f * timing.effective_row_time()).floor() as u32;
    Ok(StripeFeatures {
        stripe_count,
        roi_area: disk_area * bright_ratio,
        bright_ratio,
        phase_coefficient: Some(frac(profile.phase + profile.duty_cycle / 2.0 - r / (2.0 * t))),
        roi_rows,
        band_centers: Vec::new(),
        bright_width: Some(bright_ratio * t),
        dark_width: Some((1.0 - bright_ratio) * t),
    })
}

/// Thresholding rule for the stripe profile.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// Midpoint of the two Otsu class means.
    #[default]
    Otsu,
    Fixed(u8),
}

/// Extracts stripe features from the LED region inside `window`.
pub fn extract_features(
    frame: &Frame,
    window: &SearchWindow,
    timing: &RowTiming,
    policy: ThresholdPolicy,
) -> Result<StripeFeatures, CodecError> {
    extract_features_at(frame, 0, window, timing, policy)
}

/// Same as [`extract_features`] for a patch whose first row is row
/// `row_offset` of the full frame; row exposure times follow the full frame.
pub fn extract_features_at(
    frame: &Frame,
    row_offset: u32,
    window: &SearchWindow,
    timing: &RowTiming,
    policy: ThresholdPolicy,
) -> Result<StripeFeatures, CodecError> {
    let rect = window.clip(frame.width, frame.height).ok_or(CodecError::OutOfBounds)?;
    let peak = (rect.y0..rect.y1())
        .map(|y| *frame.row(y)[rect.x0 as usize..rect.x1() as usize].iter().max().unwrap_or(&0))
        .max()
        .unwrap_or(0);
    if peak < SIGNAL_FLOOR {
        return Err(CodecError::NoSignal);
    }
    let disk = fit_disk(frame, &rect, SIGNAL_FLOOR).ok_or(CodecError::NoSignal)?;
    let t0 = frame.timestamp_s();

    // Per-row brightness through the disk centre.
    let sample = |y: u32, half: f64| -> Option<(f64, f64)> {
        let lo = (disk.cx - half).round().max(rect.x0 as f64) as u32;
        let hi = (disk.cx + half).round().min(rect.x1() as f64 - 1.0) as u32;
        (hi >= lo).then(|| {
            let row = frame.row(y);
            let sum: f64 = (lo..=hi).map(|x| row[x as usize] as f64).sum();
            (sum / (hi - lo + 1) as f64, timing.row_time(t0, y + row_offset))
        })
    };
    let mut profile: Vec<(f64, f64)> = (rect.y0..rect.y1())
        .filter_map(|y| {
            let dy = y as f64 - disk.cy;
            if dy.abs() > disk.radius - 1.0 {
                return None;
            }
            let chord = (disk.radius * disk.radius - dy * dy).sqrt();
            sample(y, (0.3 * chord).max(0.5))
        })
        .collect();
    if profile.len() < 2 {
        profile = (rect.y0..rect.y1()).filter_map(|y| sample(y, 0.5)).collect();
    }
    let (values, times): (Vec<f64>, Vec<f64>) = profile.into_iter().unzip();

    let (threshold, contrast) = match policy {
        ThresholdPolicy::Otsu => {
            let mut hist = [0u64; 256];
            for &v in &values {
                hist[v.round().clamp(0.0, 255.0) as usize] += 1;
            }
            match otsu_split(&hist) {
                Some(k) => {
                    let (lo, hi) = class_means(&hist, k);
                    ((lo + hi) / 2.0, hi - lo)
                }
                None => (values[0], 0.0),
            }
        }
        ThresholdPolicy::Fixed(t) => {
            let max = values.iter().cloned().fold(f64::MIN, f64::max);
            let min = values.iter().cloned().fold(f64::MAX, f64::min);
            (t as f64, max - min)
        }
    };

    if contrast < MIN_STRIPE_CONTRAST {
        let cut = (peak as f64 / 2.0).ceil() as u8;
        return Ok(StripeFeatures {
            stripe_count: 1,
            roi_area: count_at_least(frame, &rect, cut),
            bright_ratio: 1.0,
            phase_coefficient: None,
            roi_rows: 2.0 * disk.radius,
            band_centers: Vec::new(),
            bright_width: None,
            dark_width: None,
        });
    }

    let runs = segment(&values, &times, threshold, HYSTERESIS * contrast);
    let stripe_count = runs.iter().filter(|r| r.bright).count() as u32;
    let mean_len = |bright: bool| {
        let lens: Vec<f64> = runs
            .iter()
            .filter(|r| r.bright == bright && r.complete)
            .map(|r| r.end - r.start)
            .collect();
        (!lens.is_empty()).then(|| lens.iter().sum::<f64>() / lens.len() as f64)
    };
    let (bright_width, dark_width) = (mean_len(true), mean_len(false));
    let bright_ratio = match (bright_width, dark_width) {
        (Some(b), Some(d)) if b + d > 0.0 => b / (b + d),
        _ => values.iter().filter(|&&v| v >= threshold).count() as f64 / values.len() as f64,
    };
    let band_centers: Vec<f64> = runs
        .iter()
        .filter(|r| r.bright && r.complete)
        .map(|r| (r.start + r.end) / 2.0)
        .collect();
    let phase_coefficient = band_spacing(&band_centers)
        .filter(|&p| p > 0.0)
        .and_then(|p| mean_phase(&band_centers, 1.0 / p));
    let cut = threshold.ceil().clamp(0.0, 255.0) as u8;
    Ok(StripeFeatures {
        stripe_count,
        roi_area: count_at_least(frame, &rect, cut),
        bright_ratio: bright_ratio.clamp(0.0, 1.0),
        phase_coefficient,
        roi_rows: 2.0 * disk.radius,
        band_centers,
        bright_width,
        dark_width,
    })
}

fn count_at_least(frame: &Frame, rect: &crate::types::PixelRect, cut: u8) -> f64 {
    (rect.y0..rect.y1())
        .map(|y| {
            frame.row(y)[rect.x0 as usize..rect.x1() as usize]
                .iter()
                .filter(|&&v| v >= cut)
                .count()
        })
        .sum::<usize>() as f64
}

#[derive(Debug, Clone, Copy)]
struct Run {
    bright: bool,
    start: f64,
    end: f64,
    /// Both ends are threshold crossings rather than profile ends.
    complete: bool,
}

/// Splits a sampled profile into bright and dark runs with hysteresis.
/// Run boundaries are placed where the profile crosses `threshold`,
/// interpolated between samples.
fn segment(values: &[f64], times: &[f64], threshold: f64, band: f64) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut bright = values[0] >= threshold;
    let mut start = times[0];
    let mut start_is_edge = false;
    for k in 1..values.len() {
        let flips = if bright { values[k] <= threshold - band } else { values[k] >= threshold + band };
        if !flips {
            continue;
        }
        // Walk back to the sample pair that straddles the threshold.
        let mut j = k;
        while j > 1 && (values[j - 1] >= threshold) != bright {
            j -= 1;
        }
        let (v0, v1) = (values[j - 1], values[j]);
        let w = if v1 != v0 { ((threshold - v0) / (v1 - v0)).clamp(0.0, 1.0) } else { 0.5 };
        let edge = times[j - 1] + w * (times[j] - times[j - 1]);
        runs.push(Run { bright, start, end: edge, complete: start_is_edge });
        bright = !bright;
        start = edge;
        start_is_edge = true;
    }
    runs.push(Run { bright, start, end: times[times.len() - 1], complete: false });
    runs
}

/// A disk in native sensor pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Rendered stripe patch positioned in a native frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripePatch {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

/// Fraction of the pixel centred at `(x, y)` covered by the disk, from a 4x4
/// supersampling grid.
pub fn pixel_coverage(disk: &Disk, x: f64, y: f64) -> f64 {
    let d = (x - disk.cx).hypot(y - disk.cy);
    if d <= disk.radius - 0.75 {
        return 1.0;
    }
    if d >= disk.radius + 0.75 {
        return 0.0;
    }
    let r2 = disk.radius * disk.radius;
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let px = x - 0.375 + 0.25 * sx as f64 - disk.cx;
            let py = y - 0.375 + 0.25 * sy as f64 - disk.cy;
            if px * px + py * py <= r2 {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

/// Renders a modulated disk onto a native-resolution sensor of size
/// `bounds` whose first row starts exposing at `t0`.
pub fn synthesize_stripes(
    wave: &dyn Waveform,
    timing: &RowTiming,
    disk: &Disk,
    t0: f64,
    bounds: (u32, u32),
) -> StripePatch {
    let empty = StripePatch { x0: 0, y0: 0, width: 0, height: 0, pixels: Vec::new() };
    if !(disk.radius > 0.0) {
        return empty;
    }
    let x0 = (disk.cx - disk.radius - 1.0).floor().max(0.0);
    let y0 = (disk.cy - disk.radius - 1.0).floor().max(0.0);
    let x1 = (disk.cx + disk.radius + 1.0).ceil().min(bounds.0 as f64 - 1.0);
    let y1 = (disk.cy + disk.radius + 1.0).ceil().min(bounds.1 as f64 - 1.0);
    if x1 < x0 || y1 < y0 {
        return empty;
    }
    let (x0, y0, x1, y1) = (x0 as u32, y0 as u32, x1 as u32, y1 as u32);
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut pixels = vec![0u8; (w * h) as usize];
    for y in y0..=y1 {
        let level = wave.level(t0 + y as f64 * timing.t_row, timing.t_exp);
        for x in x0..=x1 {
            let cov = pixel_coverage(disk, x as f64, y as f64);
            if cov > 0.0 {
                pixels[((y - y0) * w + (x - x0)) as usize] = (255.0 * cov * level).round() as u8;
            }
        }
    }
    StripePatch { x0, y0, width: w, height: h, pixels }
}

/// Per-feature acceptance bands used when matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub stripe_count: u32,
    pub bright_ratio: f64,
    pub phase: f64,
    /// Allowed relative deviation of the area.
    pub area_ratio: f64,
    /// Disk diameter in native rows at which records are checked for collisions.
    pub reference_native_rows: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            stripe_count: 1,
            bright_ratio: 0.1,
            phase: 0.15,
            area_ratio: 0.3,
            reference_native_rows: 83.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuminaireRecord {
    pub id: LedId,
    pub position: WorldPoint,
    pub profile: ModulationProfile,
    pub half_power_angle_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct DatabaseFile {
    version: u32,
    records: Vec<RecordFile>,
}

#[derive(Serialize, Deserialize)]
struct RecordFile {
    id: String,
    x_cm: f64,
    y_cm: f64,
    z_cm: f64,
    freq_hz: f64,
    duty: f64,
    phase: f64,
    half_power_deg: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    manchester: bool,
}

/// Known luminaires with the timing their features are predicted for.
#[derive(Debug, Clone, PartialEq)]
pub struct LuminaireDatabase {
    records: Vec<LuminaireRecord>,
    tolerances: Tolerances,
    timing: RowTiming,
}

impl LuminaireDatabase {
    pub const FILE_VERSION: u32 = 1;

    /// Builds a database, rejecting duplicate ids and feature collisions.
    pub fn new(
        records: Vec<LuminaireRecord>,
        tolerances: Tolerances,
        timing: RowTiming,
    ) -> Result<Self, CodecError> {
        let mut seen = HashSet::new();
        for r in &records {
            r.profile.validate()?;
            if !seen.insert(r.id.clone()) {
                return Err(CodecError::DuplicateId(r.id.clone()));
            }
        }
        if let Some(&(a, b)) = find_collisions(&records, &tolerances, &timing).first() {
            return Err(CodecError::Collision(records[a].id.clone(), records[b].id.clone()));
        }
        Ok(Self { records, tolerances, timing })
    }

    /// Four ceiling lamps at 150 cm with 1, 2, 4 and 8 kHz codes.
    pub fn default_records() -> Vec<LuminaireRecord> {
        let rows = [
            ("LED1", -46.5, 49.5, 1000.0, 0.5, 0.0),
            ("LED2", -46.0, -42.0, 2000.0, 0.33, 0.5),
            ("LED3", 46.0, 49.0, 4000.0, 0.5, 0.25),
            ("LED4", 48.0, -42.5, 8000.0, 0.33, 0.75),
        ];
        rows.iter()
            .map(|&(id, x, y, f, d, p)| LuminaireRecord {
                id: LedId::new(id),
                position: WorldPoint::new(x, y, 150.0),
                profile: ModulationProfile { frequency_hz: f, duty_cycle: d, phase: p, manchester: false },
                half_power_angle_deg: 60.0,
            })
            .collect()
    }

    pub fn default_table(timing: RowTiming) -> Self {
        Self::new(Self::default_records(), Tolerances::default(), timing)
            .expect("default records are collision free")
    }

    pub fn from_json(text: &str, tolerances: Tolerances, timing: RowTiming) -> Result<Self, CodecError> {
        let file: DatabaseFile = serde_json::from_str(text)?;
        if file.version != Self::FILE_VERSION {
            return Err(CodecError::UnsupportedVersion(file.version));
        }
        let records = file
            .records
            .into_iter()
            .map(|r| LuminaireRecord {
                id: LedId(r.id),
                position: WorldPoint::new(r.x_cm, r.y_cm, r.z_cm),
                profile: ModulationProfile {
                    frequency_hz: r.freq_hz,
                    duty_cycle: r.duty,
                    phase: r.phase,
                    manchester: r.manchester,
                },
                half_power_angle_deg: r.half_power_deg,
            })
            .collect();
        Self::new(records, tolerances, timing)
    }

    pub fn load(path: &Path, tolerances: Tolerances, timing: RowTiming) -> Result<Self, CodecError> {
        Self::from_json(&std::fs::read_to_string(path)?, tolerances, timing)
    }

    pub fn to_json(&self) -> String {
        let file = DatabaseFile {
            version: Self::FILE_VERSION,
            records: self
                .records
                .iter()
                .map(|r| RecordFile {
                    id: r.id.0.clone(),
                    x_cm: r.position.x,
                    y_cm: r.position.y,
                    z_cm: r.position.z,
                    freq_hz: r.profile.frequency_hz,
                    duty: r.profile.duty_cycle,
                    phase: r.profile.phase,
                    half_power_deg: r.half_power_angle_deg,
                    manchester: r.profile.manchester,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("database serialises")
    }

    pub fn records(&self) -> &[LuminaireRecord] {
        &self.records
    }

    pub fn get(&self, id: &LedId) -> Option<&LuminaireRecord> {
        self.records.iter().find(|r| &r.id == id)
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tolerances
    }

    pub fn timing(&self) -> &RowTiming {
        &self.timing
    }

    /// Same records predicted for a different row timing.
    pub fn with_timing(&self, timing: RowTiming) -> Result<Self, CodecError> {
        Self::new(self.records.clone(), self.tolerances, timing)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

/// Whether two expected feature vectors fall inside each other's doubled
/// tolerance bands on every feature.
pub fn features_collide(a: &StripeFeatures, b: &StripeFeatures, tol: &Tolerances) -> bool {
    let count = a.stripe_count.abs_diff(b.stripe_count) <= 2 * tol.stripe_count;
    let ratio = (a.bright_ratio - b.bright_ratio).abs() <= 2.0 * tol.bright_ratio;
    let area = (a.roi_area / b.roi_area - 1.0).abs() <= 2.0 * tol.area_ratio
        || (b.roi_area / a.roi_area - 1.0).abs() <= 2.0 * tol.area_ratio;
    let phase = match (a.phase_coefficient, b.phase_coefficient) {
        (Some(p), Some(q)) => circular_distance(p, q) <= 2.0 * tol.phase,
        _ => true,
    };
    count && ratio && area && phase
}

/// Index pairs of records that cannot be separated at the reference disk
/// size. Records unresolvable under `timing` are never matched and are
/// skipped.
pub fn find_collisions(
    records: &[LuminaireRecord],
    tol: &Tolerances,
    timing: &RowTiming,
) -> Vec<(usize, usize)> {
    let rows = tol.reference_native_rows / timing.scale();
    let expected: Vec<_> = records
        .iter()
        .map(|r| expected_features(&r.profile, timing, rows).ok())
        .collect();
    let mut out = Vec::new();
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            if let (Some(a), Some(b)) = (&expected[i], &expected[j]) {
                if features_collide(a, b, tol) {
                    out.push((i, j));
                }
            }
        }
    }
    out
}

/// Whether measured features fall within tolerance of a record.
pub fn within_tolerance(
    measured: &StripeFeatures,
    record: &LuminaireRecord,
    tol: &Tolerances,
    timing: &RowTiming,
) -> bool {
    let Ok(exp) = expected_features(&record.profile, timing, measured.roi_rows) else {
        return false;
    };
    if measured.stripe_count.abs_diff(exp.stripe_count) > tol.stripe_count {
        return false;
    }
    if (measured.bright_ratio - exp.bright_ratio).abs() > tol.bright_ratio {
        return false;
    }
    if exp.roi_area > 0.0 && (measured.roi_area / exp.roi_area - 1.0).abs() > tol.area_ratio {
        return false;
    }
    // A striped record is only confirmed by at least one complete bright band
    // and one complete dark gap of the right durations.
    let row = timing.effective_row_time();
    let width_ok = |m: Option<f64>, e: Option<f64>| match (m, e) {
        (Some(m), Some(e)) => (m - e).abs() <= SPACING_TOLERANCE * e + 0.5 * row,
        (_, None) => true,
        (None, Some(_)) => false,
    };
    if !width_ok(measured.bright_width, exp.bright_width)
        || !width_ok(measured.dark_width, exp.dark_width)
    {
        return false;
    }
    if let Some(spacing) = band_spacing(&measured.band_centers) {
        if (spacing * record.profile.effective_frequency() - 1.0).abs() > SPACING_TOLERANCE {
            return false;
        }
    }
    let measured_phase = if measured.band_centers.is_empty() {
        None
    } else {
        mean_phase(&measured.band_centers, record.profile.effective_frequency())
    };
    match (measured_phase, exp.phase_coefficient) {
        (Some(m), Some(e)) => circular_distance(m, e) <= tol.phase,
        _ => true,
    }
}

/// Mean spacing of consecutive band centres.
pub fn band_spacing(centers: &[f64]) -> Option<f64> {
    let n = centers.len();
    (n >= 2).then(|| (centers[n - 1] - centers[0]) / (n - 1) as f64)
}

/// Identifies the luminaire whose predicted features match `f`.
pub fn match_id(f: &StripeFeatures, db: &LuminaireDatabase) -> Result<LedId, CodecError> {
    let candidates: Vec<LedId> = db
        .records
        .iter()
        .filter(|r| within_tolerance(f, r, &db.tolerances, &db.timing))
        .map(|r| r.id.clone())
        .collect();
    match candidates.len() {
        0 => Err(CodecError::NoMatch),
        1 => Ok(candidates.into_iter().next().expect("one candidate")),
        _ => Err(CodecError::Ambiguous(candidates)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(f: f64, d: f64, p: f64) -> ModulationProfile {
        ModulationProfile::new(f, d, p).unwrap()
    }

    fn timing_with(t_row: f64, t_exp: f64) -> RowTiming {
        RowTiming { t_row, t_exp, ..RowTiming::native() }
    }

    /// Renders a disk into a native frame and returns the frame plus a window
    /// around it.
    fn render(wave: &dyn Waveform, timing: &RowTiming, disk: Disk, t0_ns: u64) -> (Frame, SearchWindow) {
        let (w, h) = (400u32, 400u32);
        let patch = synthesize_stripes(wave, timing, &disk, t0_ns as f64 * 1e-9, (w, h));
        let mut frame = Frame::new(w, h, t0_ns);
        for y in 0..patch.height {
            for x in 0..patch.width {
                frame.set(patch.x0 + x, patch.y0 + y, patch.pixels[(y * patch.width + x) as usize]);
            }
        }
        let win = SearchWindow::new(disk.cx, disk.cy, 2.0 * disk.radius + 4.0, 2.0 * disk.radius + 4.0);
        (frame, win)
    }

    #[test]
    fn profile_validation() {
        assert!(ModulationProfile::new(0.0, 0.5, 0.0).is_err());
        assert!(ModulationProfile::new(1.0, 0.0, 0.0).is_err());
        assert!(ModulationProfile::new(1.0, 1.01, 0.0).is_err());
        assert!(ModulationProfile::new(1.0, 0.5, 1.0).is_err());
        let mut p = profile(1000.0, 0.5, 0.0);
        p.manchester = true;
        assert_eq!(p.effective_frequency(), 2000.0);
    }

    #[test]
    fn pwm_on_time_matches_numeric_integration() {
        let wave = PwmWave::new(&profile(1000.0, 0.3, 0.4));
        let oracle = |a: f64, b: f64| {
            let n = 200_000;
            let dt = (b - a) / n as f64;
            (0..n)
                .filter(|&k| {
                    let t = a + (k as f64 + 0.5) * dt;
                    frac(t * 1000.0 - 0.4) < 0.3
                })
                .count() as f64
                * dt
        };
        for &(a, b) in &[(0.0, 1e-3), (1.7e-4, 3.3e-3), (-2.2e-3, 1.1e-4), (5e-4, 5.2e-4)] {
            assert!((wave.on_time(a, b) - oracle(a, b)).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn expected_counts() {
        let t = timing_with(25e-6, 20e-6);
        let e = expected_features(&profile(1000.0, 0.5, 0.0), &t, 200.0).unwrap();
        assert_eq!(e.stripe_count, 5);
        let full = expected_features(&profile(1000.0, 1.0, 0.0), &t, 200.0).unwrap();
        assert_eq!((full.stripe_count, full.bright_ratio), (1, 1.0));
        let slow = expected_features(&profile(500.0, 0.5, 0.0), &t, 200.0).unwrap();
        assert!(e.stripe_count.abs_diff(2 * slow.stripe_count) <= 1);
        assert!(matches!(
            expected_features(&profile(20_000.0, 0.5, 0.0), &t, 200.0),
            Err(CodecError::Unresolvable { .. })
        ));
        // Exposure equal to one period washes out the stripes.
        let whole = timing_with(25e-6, 1e-3);
        assert!(expected_features(&profile(1000.0, 0.5, 0.0), &whole, 200.0).is_err());
    }

    #[test]
    fn expected_bright_ratio_matches_row_integration() {
        // Oracle: sample the row level finely over one period and threshold at
        // the midpoint between its extremes.
        for &(f, d, e) in &[(1000.0, 0.5, 20e-6), (2000.0, 0.33, 200e-6), (4000.0, 0.5, 200e-6), (1000.0, 0.2, 400e-6), (1000.0, 0.8, 400e-6)] {
            let p = profile(f, d, 0.0);
            let wave = PwmWave::new(&p);
            let n = 20_000;
            let levels: Vec<f64> = (0..n).map(|k| wave.level(k as f64 / n as f64 / f, e)).collect();
            let max = levels.iter().cloned().fold(f64::MIN, f64::max);
            let min = levels.iter().cloned().fold(f64::MAX, f64::min);
            let mid = (max + min) / 2.0;
            let frac_bright = levels.iter().filter(|&&l| l >= mid).count() as f64 / n as f64;
            let t = timing_with(25e-6, e);
            let exp = expected_features(&p, &t, 100.0).unwrap();
            assert!((exp.bright_ratio - frac_bright).abs() < 2e-3, "{f} {d} {e}: {} vs {frac_bright}", exp.bright_ratio);
        }
    }

    #[test]
    fn shifting_by_one_period_is_bit_identical() {
        let p = profile(2000.0, 0.33, 0.5);
        let wave = PwmWave::new(&p);
        let t = RowTiming::native();
        let disk = Disk { cx: 60.0, cy: 70.0, radius: 30.0 };
        let a = synthesize_stripes(&wave, &t, &disk, 3.0, (200, 200));
        let b = synthesize_stripes(&wave, &t, &disk, 3.0 + p.period(), (200, 200));
        assert_eq!(a, b);
    }

    #[test]
    fn full_duty_renders_uniform_disk() {
        let wave = PwmWave::new(&profile(1000.0, 1.0, 0.0));
        let disk = Disk { cx: 50.0, cy: 50.0, radius: 20.0 };
        let patch = synthesize_stripes(&wave, &RowTiming::native(), &disk, 0.0, (100, 100));
        let inner: Vec<u8> = patch
            .pixels
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let x = patch.x0 as f64 + (*i as u32 % patch.width) as f64;
                let y = patch.y0 as f64 + (*i as u32 / patch.width) as f64;
                (x - 50.0).hypot(y - 50.0) < 19.0
            })
            .map(|(_, &v)| v)
            .collect();
        assert!(inner.iter().all(|&v| v == 255));
    }

    #[test]
    fn rows_follow_waveform_integral() {
        let p = profile(4000.0, 0.5, 0.25);
        let wave = PwmWave::new(&p);
        let t = RowTiming::native();
        let disk = Disk { cx: 50.0, cy: 50.0, radius: 30.0 };
        let patch = synthesize_stripes(&wave, &t, &disk, 0.0, (100, 100));
        let cx = 50 - patch.x0;
        for y in 25..75u32 {
            let oracle = 255.0 * wave.on_time(y as f64 * t.t_row, y as f64 * t.t_row + t.t_exp) / t.t_exp;
            let v = patch.pixels[((y - patch.y0) * patch.width + cx) as usize] as f64;
            assert!((v - oracle).abs() <= 1.0, "row {y}: {v} vs {oracle}");
        }
    }

    #[test]
    fn half_period_exposure_still_resolves_bands() {
        let p = profile(1000.0, 0.5, 0.01);
        let t = timing_with(25e-6, 0.5e-3);
        let wave = PwmWave::new(&p);
        let disk = Disk { cx: 150.0, cy: 150.0, radius: 80.0 };
        let (frame, win) = render(&wave, &t, disk, 0);
        let patch_min = (100..200).map(|y| frame.get(150, y)).min().unwrap();
        assert!(patch_min > 0, "no fully dark rows expected");
        let f = extract_features(&frame, &win, &t, ThresholdPolicy::Otsu).unwrap();
        let e = expected_features(&p, &t, f.roi_rows).unwrap();
        assert!(f.stripe_count.abs_diff(e.stripe_count) <= 1, "{f:?} vs {e:?}");
    }

    #[test]
    fn saturated_patch_is_one_band() {
        let frame = Frame::from_pixels(20, 20, 0, vec![255; 400]).unwrap();
        let win = SearchWindow::new(9.5, 9.5, 20.0, 20.0);
        let f = extract_features(&frame, &win, &RowTiming::native(), ThresholdPolicy::Otsu).unwrap();
        assert_eq!(f.roi_area, 400.0);
        assert_eq!(f.stripe_count, 1);
        assert_eq!(f.bright_ratio, 1.0);
    }

    #[test]
    fn dark_patch_has_no_signal() {
        let frame = Frame::new(20, 20, 0);
        let win = SearchWindow::new(9.5, 9.5, 20.0, 20.0);
        assert!(matches!(
            extract_features(&frame, &win, &RowTiming::native(), ThresholdPolicy::Otsu),
            Err(CodecError::NoSignal)
        ));
        let off = SearchWindow::new(-50.0, 9.5, 20.0, 20.0);
        assert!(matches!(
            extract_features(&frame, &off, &RowTiming::native(), ThresholdPolicy::Otsu),
            Err(CodecError::OutOfBounds)
        ));
    }

    #[test]
    fn default_records_round_trip_noiseless() {
        let t = RowTiming::native();
        let db = LuminaireDatabase::default_table(t);
        for rec in db.records() {
            for &(cy, r) in &[(120.0, 41.7), (187.3, 35.0), (150.6, 60.0)] {
                let wave = PwmWave::new(&rec.profile);
                let (frame, win) = render(&wave, &t, Disk { cx: 200.0, cy, radius: r }, 5_000_000_000);
                let f = extract_features(&frame, &win, &t, ThresholdPolicy::Otsu).unwrap();
                assert_eq!(match_id(&f, &db).unwrap(), rec.id, "{f:?}");
            }
        }
    }

    #[test]
    fn exact_expected_features_match() {
        let t = RowTiming::native();
        let db = LuminaireDatabase::default_table(t);
        for rec in db.records() {
            let f = expected_features(&rec.profile, &t, 83.0).unwrap();
            assert_eq!(match_id(&f, &db).unwrap(), rec.id);
        }
        let empty = LuminaireDatabase::new(vec![], Tolerances::default(), t).unwrap();
        let f = expected_features(&db.records()[0].profile, &t, 83.0).unwrap();
        assert!(matches!(match_id(&f, &empty), Err(CodecError::NoMatch)));
    }

    #[test]
    fn ambiguous_when_phase_cannot_separate() {
        let t = RowTiming::native();
        let mut recs = LuminaireDatabase::default_records();
        recs.truncate(1);
        let mut twin = recs[0].clone();
        twin.id = LedId::new("LED1b");
        twin.profile.phase = 0.5;
        recs.push(twin);
        let db = LuminaireDatabase::new(recs, Tolerances::default(), t).unwrap();
        let mut f = expected_features(&db.records()[0].profile, &t, 83.0).unwrap();
        f.band_centers.clear();
        assert!(f.bright_width.is_some());
        assert!(matches!(match_id(&f, &db), Err(CodecError::Ambiguous(ids)) if ids.len() == 2));
    }

    #[test]
    fn database_rejects_duplicates_and_collisions() {
        let t = RowTiming::native();
        let mut recs = LuminaireDatabase::default_records();
        recs[1].id = recs[0].id.clone();
        assert!(matches!(
            LuminaireDatabase::new(recs, Tolerances::default(), t),
            Err(CodecError::DuplicateId(_))
        ));
        let mut recs = LuminaireDatabase::default_records();
        recs[1].profile = recs[0].profile;
        assert!(matches!(
            LuminaireDatabase::new(recs, Tolerances::default(), t),
            Err(CodecError::Collision(..))
        ));
    }

    #[test]
    fn compressed_database_drops_unresolvable_lamp() {
        let t = RowTiming::compressed();
        let db = LuminaireDatabase::default_table(t);
        let rows = db.tolerances().reference_native_rows / t.scale();
        let resolvable = db
            .records()
            .iter()
            .filter(|r| expected_features(&r.profile, &t, rows).is_ok())
            .count();
        assert_eq!(resolvable, 3);
    }

    #[test]
    fn json_round_trip() {
        let t = RowTiming::native();
        let db = LuminaireDatabase::default_table(t);
        let text = db.to_json();
        assert!(text.contains("\"version\": 1"));
        let back = LuminaireDatabase::from_json(&text, Tolerances::default(), t).unwrap();
        assert_eq!(back, db);
        let bad = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(
            LuminaireDatabase::from_json(&bad, Tolerances::default(), t),
            Err(CodecError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn jittered_train_preserves_duty() {
        let p = profile(2000.0, 0.33, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wave = JitteredPulseTrain::new(&p, 12.5e-6, 0.0, 0.1, &mut rng);
        let on = wave.on_time(0.01, 0.09);
        assert!((on / 0.08 - 0.33).abs() < 0.01, "{on}");
        let still = JitteredPulseTrain::new(&p, 0.0, 0.0, 0.1, &mut rng);
        let ideal = PwmWave::new(&p);
        assert!((still.on_time(0.013, 0.0171) - ideal.on_time(0.013, 0.0171)).abs() < 1e-12);
    }

    #[test]
    fn stripe_count_monotone_in_frequency() {
        let t = RowTiming::native();
        let mut last = 0;
        for k in 1..=40 {
            let f = 250.0 * k as f64;
            let e = expected_features(&profile(f, 0.5, 0.0), &t, 83.0).unwrap();
            assert!(e.stripe_count >= last);
            last = e.stripe_count;
        }
        // Measured counts on rendered disks follow the same ordering.
        let mut last = 0;
        for f in [500.0, 1000.0, 2000.0, 4000.0, 8000.0] {
            let (frame, win) = render(&PwmWave::new(&profile(f, 0.5, 0.0)), &t, Disk { cx: 200.0, cy: 200.0, radius: 60.0 }, 0);
            let m = extract_features(&frame, &win, &t, ThresholdPolicy::Otsu).unwrap();
            assert!(m.stripe_count >= last, "{f}: {m:?}");
            last = m.stripe_count;
        }
    }

    proptest! {
        #[test]
        fn collision_check_equals_brute_force(
            specs in prop::collection::vec((1usize..12, 1usize..9, 0usize..8), 2..6)
        ) {
            let t = RowTiming::native();
            let tol = Tolerances::default();
            let records: Vec<LuminaireRecord> = specs
                .iter()
                .enumerate()
                .map(|(i, &(f, d, p))| LuminaireRecord {
                    id: LedId(format!("L{i}")),
                    position: WorldPoint::new(i as f64, 0.0, 150.0),
                    profile: profile(500.0 * f as f64, d as f64 / 10.0, p as f64 / 8.0),
                    half_power_angle_deg: 60.0,
                })
                .collect();
            let rows = tol.reference_native_rows / t.scale();
            let mut oracle = Vec::new();
            for i in 0..records.len() {
                for j in (i + 1)..records.len() {
                    let (Ok(a), Ok(b)) = (
                        expected_features(&records[i].profile, &t, rows),
                        expected_features(&records[j].profile, &t, rows),
                    ) else { continue };
                    let close = a.stripe_count.abs_diff(b.stripe_count) <= 2
                        && (a.bright_ratio - b.bright_ratio).abs() <= 0.2
                        && ((a.roi_area / b.roi_area - 1.0).abs() <= 0.6 || (b.roi_area / a.roi_area - 1.0).abs() <= 0.6)
                        && match (a.phase_coefficient, b.phase_coefficient) {
                            (Some(p), Some(q)) => { let d = (p - q).rem_euclid(1.0); d.min(1.0 - d) <= 0.3 }
                            _ => true,
                        };
                    if close { oracle.push((i, j)); }
                }
            }
            prop_assert_eq!(find_collisions(&records, &tol, &t), oracle);
        }

        #[test]
        fn noiseless_database_inputs_never_misidentify(idx in 0usize..4, cy in 60.0..340.0f64, r in 10.0..60.0f64, k in 0u64..50) {
            let t = RowTiming::native();
            let db = LuminaireDatabase::default_table(t);
            let rec = &db.records()[idx];
            let (frame, win) = render(&PwmWave::new(&rec.profile), &t, Disk { cx: 200.0, cy: cy.clamp(r + 2.0, 398.0 - r), radius: r }, k * 1_000_000_000);
            if let Ok(f) = extract_features(&frame, &win, &t, ThresholdPolicy::Otsu) {
                match match_id(&f, &db) {
                    Ok(id) => prop_assert_eq!(&id, &rec.id),
                    Err(CodecError::NoMatch) => {}
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
        }
    }
}
