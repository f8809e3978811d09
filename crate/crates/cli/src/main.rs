use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vlp_core::harness::experiment::{ExperimentSpec, RenderPreset};
use vlp_core::harness::report::{read_samples, summary_text, write_outputs};
use vlp_core::harness::stats::{error_distribution, Axis};
use vlp_core::harness::run_experiment;
use vlp_core::mesh::pipeline::{Topology, IMAGE_TOPIC};
use vlp_core::mesh::wire::{read_message, Body, ImageBody, Message};
use vlp_core::simulator::{render_frame, CameraPose, ScenePlatform};

const EXIT_DEGRADED: u8 = 2;

#[derive(Parser)]
#[command(name = "vlp", version, about = "Visible light positioning simulator and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and write its reports.
    Run {
        spec: PathBuf,
        #[arg(long)]
        topology: Option<Topology>,
        /// Render preset: native or compressed.
        #[arg(long)]
        preset: Option<RenderPreset>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a samples CSV written by `run`.
    Stats {
        samples: PathBuf,
        /// Axis of motion for the fitted line; guessed from the truth path
        /// when omitted.
        #[arg(long)]
        axis: Option<AxisArg>,
    },
    /// Decode and describe the messages in a wire capture.
    Protodump { frame: PathBuf },
    /// Print a spec: A to F, grid, or static.
    Template { name: String },
    /// Render one frame and write it as an image message.
    Frame {
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        x: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        y: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value = "compressed")]
        preset: RenderPreset,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AxisArg {
    X,
    Y,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { spec, topology, preset, seed, out } => run_spec(&spec, topology, preset, seed, out),
        Command::Stats { samples, axis } => stats(&samples, axis),
        Command::Protodump { frame } => protodump(&frame),
        Command::Template { name } => {
            let spec = match name.as_str() {
                "grid" => ExperimentSpec::grid(),
                "static" => ExperimentSpec::static_at(0.0, 0.0, 50),
                letter => ExperimentSpec::template(letter)
                    .with_context(|| format!("unknown template {letter:?} (expected A-F, grid or static)"))?,
            };
            println!("{}", spec.to_json());
            Ok(ExitCode::SUCCESS)
        }
        Command::Frame { x, y, yaw, preset, out } => {
            let render = preset.render();
            let scene = ScenePlatform::default_scene(render.timing());
            let frame = render_frame(&scene, &CameraPose::new(x, y, 0.0, yaw), 0.0, &render);
            let msg = Message::topic(IMAGE_TOPIC, 0, frame.timestamp_ns, Body::Image(ImageBody::from_frame(&frame)?));
            let mut file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let n = vlp_core::mesh::wire::write_message(&mut file, &msg)?;
            println!("wrote {n} bytes to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_spec(
    path: &Path,
    topology: Option<Topology>,
    preset: Option<RenderPreset>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec = ExperimentSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(t) = topology {
        spec.topology = t;
    }
    if let Some(p) = preset {
        spec.render = p;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let dir = out.unwrap_or_else(|| Path::new("runs").join(&spec.name));
    let outcome = run_experiment(&spec)?;
    let files = write_outputs(&outcome, &dir)?;
    print!("{}", summary_text(&outcome));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(if outcome.degraded() { ExitCode::from(EXIT_DEGRADED) } else { ExitCode::SUCCESS })
}

fn stats(path: &Path, axis: Option<AxisArg>) -> Result<ExitCode> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let samples = read_samples(BufReader::new(file))?;
    if samples.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    let axis = match axis {
        Some(AxisArg::X) => Axis::X,
        Some(AxisArg::Y) => Axis::Y,
        None => Axis::dominant(&samples.iter().map(|s| (s.truth_x, s.truth_y)).collect::<Vec<_>>()),
    };
    let s = error_distribution(samples, Some(axis))?;
    println!("fixes            {}", s.samples.len());
    println!("mean error       {:.4} cm", s.mean);
    println!("p90 / p95        {:.4} / {:.4} cm", s.p90, s.p95);
    println!("max error        {:.4} cm", s.max);
    if let Some(r) = s.dispersion_radius_cm {
        println!("dispersion       {r:.4} cm");
    }
    if let Some(p) = s.path_error {
        println!("path error       mean {:.4}, p90 {:.4}, max {:.4} cm", p.mean, p.p90, p.max);
    }
    if let Some(l) = s.fitted_line {
        println!("fitted line      {l}");
    }
    Ok(ExitCode::SUCCESS)
}

fn describe(body: &Body) -> String {
    match body {
        Body::Image(img) => {
            let (min, max) = img.pixels.iter().fold((u8::MAX, 0u8), |(lo, hi), &p| (lo.min(p), hi.max(p)));
            let lit = img.pixels.iter().filter(|&&p| p > 0).count();
            format!(
                "image {}x{} encoding {} | {} pixels, {} lit, range {}..{}",
                img.width,
                img.height,
                img.encoding,
                img.pixels.len(),
                lit,
                if img.pixels.is_empty() { 0 } else { min },
                max
            )
        }
        Body::Position(p) => format!(
            "position ({:.3}, {:.3}, {:.3}) cm, theta {:.4} rad, pair {}+{}, frame {}",
            p.x_w, p.y_w, p.z_w, p.theta, p.pair.0, p.pair.1, p.source_frame_seq
        ),
        Body::IdRequest { frame_seq, x0, y0, patch, .. } => {
            format!("id request frame {frame_seq}, patch {}x{} at ({x0}, {y0})", patch.width, patch.height)
        }
        Body::IdResponse { status, id } => format!("id response {status:?} {id:?}"),
        Body::LedInfoRequest { frame_seq, lamps, .. } => {
            let ids: Vec<&str> = lamps.iter().map(|l| l.id.as_str()).collect();
            format!("led info request frame {frame_seq}: {}", ids.join(", "))
        }
        Body::LedInfoResponse { ack } => format!("led info response ack={ack}"),
        Body::Ack { seq } => format!("ack {seq}"),
        Body::EndOfStream => "end of stream".to_string(),
        Body::Error { message } => format!("error {message:?}"),
    }
}

fn protodump(path: &Path) -> Result<ExitCode> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut offset = 0usize;
    let mut count = 0;
    while let Some((msg, n)) = read_message(&mut r).with_context(|| format!("decoding message at byte {offset}"))? {
        let h = &msg.header;
        println!(
            "@{offset:<8} {:?} {:?} seq {} ts {} ns, {n} bytes | {}",
            msg.kind,
            h.name,
            h.seq,
            h.timestamp_ns,
            describe(&msg.body)
        );
        offset += n;
        count += 1;
    }
    if count == 0 {
        bail!("{} holds no messages", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
