//! CSV and plain-text outputs of an experiment.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::experiment::ExperimentOutcome;
use super::stats::{ErrorStats, Sample, PMF_BIN_CM};
use super::HarnessError;
use crate::mesh::latency::Stage;

pub const SAMPLES_CSV: &str = "samples.csv";
pub const CORRECTED_CSV: &str = "samples_corrected.csv";
pub const LATENCY_CSV: &str = "latency.csv";
pub const PMF_CSV: &str = "pmf.csv";
pub const CDF_CSV: &str = "cdf.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const SPEC_JSON: &str = "spec.json";

/// Samples as CSV. Holds no wall-clock values, so the bytes depend only on
/// the experiment definition and seed.
pub fn write_samples<W: Write>(samples: &[Sample], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for s in samples {
        out.serialize(s)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<Sample>, HarnessError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<Vec<Sample>, _>>()?)
}

fn write_pmf<W: Write>(stats: &ErrorStats, mut w: W) -> Result<(), HarnessError> {
    writeln!(w, "bin_lo_cm,bin_hi_cm,probability")?;
    for (k, p) in stats.pmf.iter().enumerate() {
        let lo = k as f64 * PMF_BIN_CM;
        writeln!(w, "{lo:.1},{:.1},{p}", lo + PMF_BIN_CM)?;
    }
    Ok(())
}

fn write_cdf<W: Write>(stats: &ErrorStats, mut w: W) -> Result<(), HarnessError> {
    writeln!(w, "error_cm,cumulative")?;
    for (e, f) in &stats.cdf {
        writeln!(w, "{e},{f}")?;
    }
    Ok(())
}

fn stats_block(s: &mut String, title: &str, stats: &ErrorStats) {
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "  fixes            {}", stats.samples.len());
    let _ = writeln!(s, "  mean error       {:.4} cm", stats.mean);
    let _ = writeln!(s, "  p90 / p95        {:.4} / {:.4} cm", stats.p90, stats.p95);
    let _ = writeln!(s, "  max error        {:.4} cm", stats.max);
    if let Some(r) = stats.dispersion_radius_cm {
        let _ = writeln!(s, "  dispersion       {r:.4} cm");
    }
    if let Some(p) = &stats.path_error {
        let _ = writeln!(s, "  path error       mean {:.4}, p90 {:.4}, max {:.4} cm", p.mean, p.p90, p.max);
    }
    if let Some(l) = &stats.fitted_line {
        let _ = writeln!(s, "  fitted line      {l}");
    }
}

/// Human-readable report of one run.
pub fn summary_text(out: &ExperimentOutcome) -> String {
    let spec = &out.spec;
    let mut s = String::new();
    let _ = writeln!(s, "experiment       {}", spec.name);
    let _ = writeln!(s, "mode             {}", spec.mode);
    let _ = writeln!(s, "render           {}", spec.render);
    let _ = writeln!(s, "topology         {}", spec.topology);
    let _ = writeln!(s, "seed             {}", spec.seed);
    let _ = writeln!(s, "frames           {}", out.attempted);
    let _ = writeln!(s, "bound            {:.4} cm", out.quantization_bound_cm);
    let _ = writeln!(s, "status           {}", if out.degraded() { "degraded" } else { "ok" });
    let _ = writeln!(s);
    let title = if out.corrected.is_some() { "assumed principal point" } else { "errors" };
    stats_block(&mut s, title, &out.stats);
    if let Some(c) = &out.corrected {
        let _ = writeln!(s);
        let title = match out.calibrated_center {
            Some((u, v)) => format!("calibrated principal point ({u:.3}, {v:.3})"),
            None => "calibrated principal point".to_string(),
        };
        stats_block(&mut s, &title, c);
    }
    if !out.latency.rows.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "latency (mean per fix)");
        s.push_str(&out.latency.breakdown());
        if let Some(t) = out.latency.mean_s(Stage::Total) {
            let _ = writeln!(s, "  rate             {:.2} fixes/s", 1.0 / t);
        }
    }
    for f in &out.failures {
        let _ = writeln!(s, "failure: {f}");
    }
    s
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes every report file into `dir`, creating it if needed. Returns the
/// paths written.
pub fn write_outputs(out: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = vec![SPEC_JSON, SAMPLES_CSV, LATENCY_CSV, PMF_CSV, CDF_CSV, SUMMARY_TXT];
    fs::write(dir.join(SPEC_JSON), out.spec.to_json())?;
    write_samples(&out.stats.samples, create(dir, SAMPLES_CSV)?)?;
    if let Some(c) = &out.corrected {
        write_samples(&c.samples, create(dir, CORRECTED_CSV)?)?;
        written.push(CORRECTED_CSV);
    }
    let mut lat = create(dir, LATENCY_CSV)?;
    out.latency.write_csv(&mut lat)?;
    lat.flush()?;
    let mut pmf = create(dir, PMF_CSV)?;
    write_pmf(&out.stats, &mut pmf)?;
    pmf.flush()?;
    let mut cdf = create(dir, CDF_CSV)?;
    write_cdf(&out.stats, &mut cdf)?;
    cdf.flush()?;
    fs::write(dir.join(SUMMARY_TXT), summary_text(out))?;
    Ok(written.into_iter().map(|n| dir.join(n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip() {
        let samples = vec![
            Sample { run: 0, frame: 3, t: 3.0, truth_x: 1.0, truth_y: -2.0, est_x: 1.25, est_y: -2.5, error_cm: 0.559, path_error_cm: Some(0.5) },
            Sample { run: 1, frame: 0, t: 0.0, truth_x: 0.0, truth_y: 0.0, est_x: 0.1, est_y: 0.0, error_cm: 0.1, path_error_cm: None },
        ];
        let mut buf = Vec::new();
        write_samples(&samples, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run,frame,t,truth_x,truth_y,est_x,est_y,error_cm,path_error_cm\n"));
        assert_eq!(read_samples(&buf[..]).unwrap(), samples);
    }
}
