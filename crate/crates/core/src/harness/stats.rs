//! Error statistics for positioning runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// PMF bin width (cm).
pub const PMF_BIN_CM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("no spread along the {0} axis")]
    DegenerateFit(Axis),
    #[error("non-finite value in input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
        })
    }
}

impl Axis {
    /// Axis of motion: the coordinate with the larger spread.
    pub fn dominant(points: &[(f64, f64)]) -> Axis {
        let span = |f: fn(&(f64, f64)) -> f64| {
            let (lo, hi) = points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            hi - lo
        };
        if span(|p| p.1) > span(|p| p.0) {
            Axis::Y
        } else {
            Axis::X
        }
    }
}

fn check_finite(points: &[(f64, f64)]) -> Result<(), StatsError> {
    if points.iter().all(|p| p.0.is_finite() && p.1.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull by monotone chain, counter-clockwise, without collinear points.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn max_pairwise(points: &[(f64, f64)]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a.0 - b.0).hypot(a.1 - b.1));
        }
    }
    best
}

/// Half the largest distance between any two points.
pub fn dispersion_radius(points: &[(f64, f64)]) -> Result<f64, StatsError> {
    if points.len() < 2 {
        return Err(StatsError::TooFewPoints { needed: 2, got: points.len() });
    }
    check_finite(points)?;
    // The farthest pair always lies on the hull.
    Ok(max_pairwise(&convex_hull(points)) / 2.0)
}

/// Least-squares line of the dependent coordinate on `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub slope: f64,
    pub intercept: f64,
    /// Independent variable: `y = slope * x + intercept` for `X`,
    /// `x = slope * y + intercept` for `Y`.
    pub axis: Axis,
}

impl Line {
    fn split(axis: Axis, p: &(f64, f64)) -> (f64, f64) {
        match axis {
            Axis::X => (p.0, p.1),
            Axis::Y => (p.1, p.0),
        }
    }

    pub fn residual_ss(&self, points: &[(f64, f64)]) -> f64 {
        points
            .iter()
            .map(|p| {
                let (u, v) = Self::split(self.axis, p);
                (v - self.slope * u - self.intercept).powi(2)
            })
            .sum()
    }
}

impl std::fmt::Display for Line {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (dep, ind) = match self.axis {
            Axis::X => ("y", "x"),
            Axis::Y => ("x", "y"),
        };
        let sign = if self.intercept < 0.0 { '-' } else { '+' };
        write!(f, "{dep} = {:.4}{ind} {sign} {:.4}", self.slope, self.intercept.abs())
    }
}

pub fn fit_line(points: &[(f64, f64)], axis: Axis) -> Result<Line, StatsError> {
    if points.len() < 2 {
        return Err(StatsError::TooFewPoints { needed: 2, got: points.len() });
    }
    check_finite(points)?;
    let n = points.len() as f64;
    let (su, sv) = points.iter().fold((0.0, 0.0), |(a, b), p| {
        let (u, v) = Line::split(axis, p);
        (a + u, b + v)
    });
    let (mu, mv) = (su / n, sv / n);
    let (mut suu, mut suv) = (0.0, 0.0);
    for p in points {
        let (u, v) = Line::split(axis, p);
        suu += (u - mu) * (u - mu);
        suv += (u - mu) * (v - mv);
    }
    if suu <= f64::EPSILON * n * (1.0 + mu * mu) {
        return Err(StatsError::DegenerateFit(axis));
    }
    let slope = suv / suu;
    Ok(Line { slope, intercept: mv - slope * mu, axis })
}

/// Nearest-rank percentile of ascending `sorted` values, `p` in `(0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Probability mass over bins `[k w, (k+1) w)` starting at zero.
pub fn pmf(errors: &[f64], bin_width: f64) -> Vec<f64> {
    if errors.is_empty() || !(bin_width > 0.0) {
        return Vec::new();
    }
    let bin = |e: f64| (e.max(0.0) / bin_width).floor() as usize;
    let nbins = errors.iter().map(|&e| bin(e)).max().unwrap_or(0) + 1;
    let mut out = vec![0.0; nbins];
    for &e in errors {
        out[bin(e)] += 1.0;
    }
    let n = errors.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Empirical CDF as `(value, fraction <= value)` at each sorted sample.
pub fn cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (i, e) in sorted.into_iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == e => last.1 = f,
            _ => out.push((e, f)),
        }
    }
    out
}

/// One positioning fix against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub run: u32,
    pub frame: u32,
    /// Simulation time of the source frame (s).
    pub t: f64,
    pub truth_x: f64,
    pub truth_y: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub error_cm: f64,
    /// Distance to the commanded straight path, dynamic runs only.
    pub path_error_cm: Option<f64>,
}

impl Sample {
    pub fn estimate(&self) -> (f64, f64) {
        (self.est_x, self.est_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p90: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(errors: &[f64]) -> Option<Summary> {
        if errors.is_empty() {
            return None;
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Summary {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p90: percentile(&sorted, 90.0)?,
            p95: percentile(&sorted, 95.0)?,
            max: *sorted.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub samples: Vec<Sample>,
    pub mean: f64,
    pub p90: f64,
    pub p95: f64,
    pub max: f64,
    /// Spread of repeated fixes of one true position; `None` when the
    /// samples cover several positions or there are fewer than two.
    pub dispersion_radius_cm: Option<f64>,
    pub fitted_line: Option<Line>,
    pub path_error: Option<Summary>,
    pub pmf: Vec<f64>,
    pub cdf: Vec<(f64, f64)>,
}

/// Summarises `samples`; fits a line of the estimates along `fit_axis`
/// when given.
pub fn error_distribution(samples: Vec<Sample>, fit_axis: Option<Axis>) -> Result<ErrorStats, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::TooFewPoints { needed: 1, got: 0 });
    }
    let errors: Vec<f64> = samples.iter().map(|s| s.error_cm).collect();
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let summary = Summary::of(&errors).expect("non-empty");
    let estimates: Vec<(f64, f64)> = samples.iter().map(Sample::estimate).collect();
    let path: Vec<f64> = samples.iter().filter_map(|s| s.path_error_cm).collect();
    let first = (samples[0].truth_x, samples[0].truth_y);
    let one_position = samples.iter().all(|s| (s.truth_x, s.truth_y) == first);
    Ok(ErrorStats {
        mean: summary.mean,
        p90: summary.p90,
        p95: summary.p95,
        max: summary.max,
        dispersion_radius_cm: one_position.then(|| dispersion_radius(&estimates).ok()).flatten(),
        fitted_line: fit_axis.and_then(|a| fit_line(&estimates, a).ok()),
        path_error: Summary::of(&path),
        pmf: pmf(&errors, PMF_BIN_CM),
        cdf: cdf(&errors),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sample(e: f64) -> Sample {
        Sample { run: 0, frame: 0, t: 0.0, truth_x: 0.0, truth_y: 0.0, est_x: e, est_y: 0.0, error_cm: e, path_error_cm: None }
    }

    /// Normal equations solved by Cramer's rule on raw sums.
    fn normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion_radius(&[(3.0, 4.0); 5]).unwrap(), 0.0);
        assert_eq!(dispersion_radius(&[(0.0, 0.0), (2.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(dispersion_radius(&[(1.0, 1.0)]), Err(StatsError::TooFewPoints { needed: 2, got: 1 }));
        let collinear: Vec<_> = (0..10).map(|k| (k as f64, 2.0 * k as f64)).collect();
        assert!((dispersion_radius(&collinear).unwrap() - 9.0 * 5f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dispersion_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 3, 5, 100, 400] {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect();
            assert!((dispersion_radius(&pts).unwrap() - max_pairwise(&pts) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_examples() {
        let pts: Vec<_> = (0..6).map(|k| (k as f64, 0.5 * k as f64 - 2.0)).collect();
        let l = fit_line(&pts, Axis::X).unwrap();
        assert!((l.slope - 0.5).abs() < 1e-12 && (l.intercept + 2.0).abs() < 1e-12);
        assert!(l.residual_ss(&pts) < 1e-20);

        let vertical: Vec<_> = (0..6).map(|k| (1.0, k as f64 * 10.0)).collect();
        assert_eq!(fit_line(&vertical, Axis::X), Err(StatsError::DegenerateFit(Axis::X)));
        let l = fit_line(&vertical, Axis::Y).unwrap();
        assert!(l.slope.abs() < 1e-12 && (l.intercept - 1.0).abs() < 1e-12);
        assert_eq!(Axis::dominant(&vertical), Axis::Y);
        assert_eq!(l.to_string(), "x = 0.0000y + 1.0000");
    }

    #[test]
    fn noisy_fit_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let pts: Vec<_> = (0..176).map(|k| {
            let x = -35.0 + 0.4 * k as f64;
            (x, -0.007 * x + 0.3 + noise.sample(&mut rng))
        }).collect();
        let l = fit_line(&pts, Axis::X).unwrap();
        let (m, c) = normal_equations(&pts);
        assert!((l.slope - m).abs() < 1e-9 && (l.intercept - c).abs() < 1e-9);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 90.0), Some(4.0));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), Some(2.0));
        assert_eq!(percentile(&[7.0], 90.0), Some(7.0));
        assert_eq!(percentile(&[], 90.0), None);
    }

    #[test]
    fn single_sample_distribution() {
        let s = error_distribution(vec![sample(0.34)], None).unwrap();
        assert_eq!((s.mean, s.p90, s.p95, s.max), (0.34, 0.34, 0.34, 0.34));
        assert_eq!(s.cdf, vec![(0.34, 1.0)]);
        assert_eq!(s.pmf.len(), 4);
        assert_eq!(s.pmf[3], 1.0);
        assert_eq!(s.dispersion_radius_cm, None);
        assert!(error_distribution(Vec::new(), None).is_err());
    }

    #[test]
    fn percentiles_of_432_match_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let errors: Vec<f64> = (0..432).map(|_| rng.random_range(0.0..2.0)).collect();
        let s = error_distribution(errors.iter().map(|&e| sample(e)).collect(), None).unwrap();
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(s.p90, sorted[388]);
        assert_eq!(s.p95, sorted[410]);
        assert_eq!(s.max, sorted[431]);
    }

    proptest! {
        #[test]
        fn pmf_and_cdf_are_distributions(errors in prop::collection::vec(0.0f64..5.0, 1..300)) {
            let p = pmf(&errors, PMF_BIN_CM);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let c = cdf(&errors);
            prop_assert!(c.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
            prop_assert_eq!(c.last().unwrap().1, 1.0);
        }

        #[test]
        fn ordered_summary(errors in prop::collection::vec(0.0f64..5.0, 1..300)) {
            let s = Summary::of(&errors).unwrap();
            prop_assert!(s.mean >= 0.0 && s.p90 <= s.p95 && s.p95 <= s.max);
        }

        #[test]
        fn dispersion_is_brute_force(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..80)) {
            prop_assert!((dispersion_radius(&pts).unwrap() - max_pairwise(&pts) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn fit_minimises_residuals(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..60),
            axis in prop_oneof![Just(Axis::X), Just(Axis::Y)],
        ) {
            let Ok(l) = fit_line(&pts, axis) else { return Ok(()) };
            let best = l.residual_ss(&pts);
            for dm in [-1e-3, 0.0, 1e-3] {
                for dc in [-1e-2, 0.0, 1e-2] {
                    let p = Line { slope: l.slope + dm, intercept: l.intercept + dc, axis };
                    prop_assert!(p.residual_ss(&pts) >= best - 1e-9 * (1.0 + best));
                }
            }
        }
    }
}
