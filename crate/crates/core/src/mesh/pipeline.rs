//! The four-node positioning pipeline: camera, tracker, ID recognition and
//! locator.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::bus::{Bus, Publisher, Subscription, IMAGE_DEPTH};
use super::latency::{Clock, LatencyReport, Stage};
use super::tcp::{self, TcpReceiver, TcpSender};
use super::wire::{encode, Body, IdStatus, ImageBody, LampFix, Message, PositionBody};
use super::MeshError;
use crate::codec::{extract_features_at, match_id, CodecError, LuminaireDatabase, ThresholdPolicy};
use crate::geometry::{locate_with, select_lamp_pair, CameraIntrinsics, LocateOptions, ObservedLamp};
use crate::simulator::{run_trajectory, CameraPose, RenderConfig, ScenePlatform, Trajectory};
use crate::tracker::{track_frame, TrackStatus, TrackedLamp, TrackerConfig};
use crate::types::{Frame, LedId, SearchWindow};

pub const IMAGE_TOPIC: &str = "camera/image";
pub const ACK_TOPIC: &str = "camera/ack";
pub const LOCATION_TOPIC: &str = "location";
pub const ID_SERVICE: &str = "led_id_srv";
pub const LED_INFO_SERVICE: &str = "led_info_srv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Every node in one process, messages on the in-process bus.
    #[default]
    Local,
    /// Camera apart from the other nodes, frames over TCP.
    Split,
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Topology::Local),
            "split" => Ok(Topology::Split),
            other => Err(format!("unknown topology {other:?} (expected local or split)")),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Local => "local",
            Topology::Split => "split",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub topology: Topology,
    pub tracker: TrackerConfig,
    /// Intrinsics used by the locator; the render preset's when `None`.
    pub intrinsics: Option<CameraIntrinsics>,
    pub locate: LocateOptions,
    pub service_timeout: Duration,
    pub frame_timeout: Duration,
    /// ID requests per lamp before it is left unidentified.
    pub id_attempts: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Local,
            tracker: TrackerConfig::default(),
            intrinsics: None,
            locate: LocateOptions::default(),
            service_timeout: Duration::from_secs(10),
            frame_timeout: Duration::from_secs(60),
            id_attempts: 3,
        }
    }
}

/// Ground truth of one published frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTruth {
    pub seq: u32,
    pub t: f64,
    pub pose: CameraPose,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub positions: Vec<PositionBody>,
    pub latency: LatencyReport,
    pub truth: Vec<FrameTruth>,
    /// Frames in which at least two tracked lamps carried an id.
    pub identified_frames: u32,
    pub dropped_frames: u64,
    /// Bytes of frame traffic that crossed TCP (split topology only).
    pub wire_bytes: u64,
}

impl PipelineOutput {
    pub fn frames(&self) -> usize {
        self.truth.len()
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Stamps {
    capture: u64,
    published: u64,
}

type StampLog = Arc<Mutex<HashMap<u32, Stamps>>>;

/// Runs the pipeline over a simulated trajectory. The camera waits for the
/// tracker to acknowledge each frame before capturing the next one.
pub fn run_pipeline(
    scene: &ScenePlatform,
    traj: &Trajectory,
    render: &RenderConfig,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, MeshError> {
    render.validate().map_err(|e| MeshError::Config(e.to_string()))?;
    let clock = Clock::start();
    let stamps: StampLog = Arc::default();
    let bus = Bus::new();
    let positions = bus.subscribe(LOCATION_TOPIC, usize::MAX);
    let frames_in = bus.subscribe(IMAGE_TOPIC, IMAGE_DEPTH);
    let intr = cfg.intrinsics.unwrap_or_else(|| render.intrinsics());
    let _id_srv = bus.serve(ID_SERVICE, id_service(scene.luminaires.clone()));
    let _loc_srv = bus.serve(
        LED_INFO_SERVICE,
        locator_service(scene.luminaires.clone(), intr, cfg.locate, bus.advertise(LOCATION_TOPIC), clock),
    );
    let truth: Vec<FrameTruth> = traj
        .frame_times(render.fps)
        .into_iter()
        .enumerate()
        .map(|(k, t)| FrameTruth { seq: k as u32, t, pose: traj.pose_at(t) })
        .collect();
    let frames = || run_trajectory(scene, traj, render).map(|sf| (sf.index, sf.frame));

    let (tracked, cam, wire_bytes) = std::thread::scope(|s| {
        let tracker = s.spawn(|| tracker_node(&bus, &frames_in, cfg, clock, &stamps));
        let (cam, wire_bytes) = match cfg.topology {
            Topology::Local => {
                let mut link = LocalLink { images: bus.advertise(IMAGE_TOPIC), acks: bus.subscribe(ACK_TOPIC, 16) };
                let cam = camera_node(frames(), &mut link, cfg.frame_timeout, clock, &stamps);
                if cam.is_err() {
                    bus.close_topic(IMAGE_TOPIC);
                }
                (cam, 0)
            }
            Topology::Split => split_camera(s, &bus, frames, cfg, clock, &stamps),
        };
        (tracker.join().expect("tracker thread"), cam, wire_bytes)
    });
    let tracked = tracked?;
    cam?;

    let mut out = Vec::new();
    while let Some(m) = positions.try_recv() {
        if let Body::Position(p) = &m.body {
            out.push(p.clone());
        }
    }
    Ok(PipelineOutput {
        positions: out,
        latency: tracked.report,
        truth,
        identified_frames: tracked.identified,
        dropped_frames: frames_in.dropped(),
        wire_bytes,
    })
}

/// Camera side of a frame link.
trait CameraLink {
    fn publish(&mut self, seq: u32, frame: &Frame, clock: Clock, stamps: &StampLog) -> Result<(), MeshError>;
    fn wait_ack(&mut self, seq: u32, timeout: Duration) -> Result<(), MeshError>;
    fn finish(&mut self) -> Result<(), MeshError>;
}

struct LocalLink {
    images: Publisher,
    acks: Subscription,
}

impl CameraLink for LocalLink {
    fn publish(&mut self, seq: u32, frame: &Frame, clock: Clock, stamps: &StampLog) -> Result<(), MeshError> {
        let capture = clock.now();
        let body = Body::Image(ImageBody::from_frame(frame)?);
        let published = clock.now();
        stamps.lock().expect("stamps").insert(seq, Stamps { capture, published });
        self.images.publish(frame.timestamp_ns, body);
        Ok(())
    }

    fn wait_ack(&mut self, seq: u32, timeout: Duration) -> Result<(), MeshError> {
        let deadline = Instant::now() + timeout;
        loop {
            let m = self.acks.recv_timeout(deadline.saturating_duration_since(Instant::now()))?;
            match m.body {
                Body::Ack { seq: s } if s == seq => return Ok(()),
                Body::Ack { .. } => continue,
                Body::EndOfStream => return Err(MeshError::Closed),
                _ => return Err(MeshError::Malformed("unexpected message on ack topic".into())),
            }
        }
    }

    fn finish(&mut self) -> Result<(), MeshError> {
        self.images.publish(u64::MAX, Body::EndOfStream);
        Ok(())
    }
}

struct TcpLink {
    tx: TcpSender,
    rx: TcpReceiver,
    next_seq: u32,
    last_ts: u64,
}

impl CameraLink for TcpLink {
    fn publish(&mut self, seq: u32, frame: &Frame, clock: Clock, stamps: &StampLog) -> Result<(), MeshError> {
        let capture = clock.now();
        let body = Body::Image(ImageBody::from_frame(frame)?);
        self.last_ts = self.last_ts.max(frame.timestamp_ns);
        let bytes = encode(&Message::topic(IMAGE_TOPIC, seq, self.last_ts, body))?;
        let published = clock.now();
        stamps.lock().expect("stamps").insert(seq, Stamps { capture, published });
        self.tx.send_bytes(&bytes)?;
        self.next_seq = seq.wrapping_add(1);
        Ok(())
    }

    fn wait_ack(&mut self, seq: u32, timeout: Duration) -> Result<(), MeshError> {
        self.rx.set_timeout(Some(timeout))?;
        loop {
            match self.rx.recv()? {
                Some(m) => match m.body {
                    Body::Ack { seq: s } if s == seq => return Ok(()),
                    Body::Ack { .. } => continue,
                    Body::EndOfStream => return Err(MeshError::Closed),
                    _ => return Err(MeshError::Malformed("unexpected message on ack link".into())),
                },
                None => return Err(MeshError::Closed),
            }
        }
    }

    fn finish(&mut self) -> Result<(), MeshError> {
        let eos = Message::topic(IMAGE_TOPIC, self.next_seq, self.last_ts, Body::EndOfStream);
        self.tx.send(&eos)?;
        Ok(())
    }
}

/// Node 1: publishes frames one at a time.
fn camera_node(
    frames: impl Iterator<Item = (u32, Frame)>,
    link: &mut dyn CameraLink,
    timeout: Duration,
    clock: Clock,
    stamps: &StampLog,
) -> Result<(), MeshError> {
    for (seq, frame) in frames {
        link.publish(seq, &frame, clock, stamps)?;
        link.wait_ack(seq, timeout)?;
    }
    link.finish()
}

/// Camera on one side of a TCP connection; a bridge on the other side moves
/// frames onto the local bus and acknowledgements back.
fn split_camera<'s, 'e, I>(
    s: &'s std::thread::Scope<'s, 'e>,
    bus: &'e Bus,
    frames: impl FnOnce() -> I + Send + 's,
    cfg: &'e PipelineConfig,
    clock: Clock,
    stamps: &'e StampLog,
) -> (Result<(), MeshError>, u64)
where
    I: Iterator<Item = (u32, Frame)>,
{
    let (listener, addr) = match tcp::listen(&tcp::bind_address()) {
        Ok(v) => v,
        Err(e) => {
            bus.close_topic(IMAGE_TOPIC);
            return (Err(e), 0);
        }
    };
    let acks = bus.subscribe(ACK_TOPIC, 16);
    let mut images = bus.advertise(IMAGE_TOPIC);
    let bridge = s.spawn(move || -> Result<u64, MeshError> {
        let result = (|| {
            let (stream, _) = listener.accept()?;
            let (mut tx, mut rx) = tcp::split(stream)?;
            let ack_thread = std::thread::spawn(move || -> Result<(), MeshError> {
                loop {
                    let m = match acks.recv_timeout(Duration::from_secs(3600)) {
                        Ok(m) => m,
                        Err(MeshError::Closed) => return Ok(()),
                        Err(e) => return Err(e),
                    };
                    let done = m.body == Body::EndOfStream;
                    // The camera may already be gone after its last frame.
                    if tx.send(&m).is_err() || done {
                        return Ok(());
                    }
                }
            });
            while let Some(m) = rx.recv()? {
                let eos = m.body == Body::EndOfStream;
                images.forward(m);
                if eos {
                    break;
                }
            }
            ack_thread.join().expect("ack bridge")?;
            Ok(rx.bytes)
        })();
        if result.is_err() {
            bus.close_topic(IMAGE_TOPIC);
        }
        result
    });
    let cam = tcp::connect(addr).and_then(|(tx, rx)| {
        let mut link = TcpLink { tx, rx, next_seq: 0, last_ts: 0 };
        camera_node(frames(), &mut link, cfg.frame_timeout, clock, stamps)
    });
    if cam.is_err() {
        bus.close_topic(IMAGE_TOPIC);
        bus.close_topic(ACK_TOPIC);
    }
    match bridge.join().expect("bridge thread") {
        Ok(bytes) => (cam, bytes),
        Err(e) => (cam.and(Err(e)), 0),
    }
}

struct TrackerSummary {
    identified: u32,
    report: LatencyReport,
}

/// Node 2: tracks lamps, asks for ids of new ones and hands identified lamps
/// to the locator.
fn tracker_node(
    bus: &Bus,
    frames: &Subscription,
    cfg: &PipelineConfig,
    clock: Clock,
    stamps: &StampLog,
) -> Result<TrackerSummary, MeshError> {
    let mut acks = bus.advertise(ACK_TOPIC);
    let result = track_loop(bus, frames, cfg, clock, stamps, &mut acks);
    // Wakes the camera side whether or not tracking succeeded.
    acks.publish(u64::MAX, Body::EndOfStream);
    bus.close_topic(ACK_TOPIC);
    result
}

fn track_loop(
    bus: &Bus,
    frames: &Subscription,
    cfg: &PipelineConfig,
    clock: Clock,
    stamps: &StampLog,
    acks: &mut Publisher,
) -> Result<TrackerSummary, MeshError> {
    let mut lamps: Vec<TrackedLamp> = Vec::new();
    let mut attempts: Vec<u32> = Vec::new();
    let mut summary = TrackerSummary { identified: 0, report: LatencyReport::default() };
    let report = &mut summary.report;
    loop {
        let msg = frames.recv_timeout(cfg.frame_timeout)?;
        let received = clock.now();
        let img = match &msg.body {
            Body::EndOfStream => return Ok(summary),
            Body::Image(img) => img,
            _ => return Err(MeshError::Malformed("unexpected message on image topic".into())),
        };
        let seq = msg.header.seq;
        let frame = img.to_frame(msg.header.timestamp_ns)?;

        let t = Instant::now();
        let (next, fresh) = track_frame(std::mem::take(&mut lamps), &frame, &cfg.tracker)?;
        let mut kept_attempts = Vec::with_capacity(next.len());
        for (lamp, a) in next.into_iter().zip(attempts.iter().copied().chain(std::iter::repeat(0))) {
            if lamp.is_active() {
                lamps.push(lamp);
                kept_attempts.push(a);
            }
        }
        attempts = kept_attempts;
        for blob in &fresh {
            if let Ok(l) = TrackedLamp::from_blob(&frame, blob, &cfg.tracker) {
                lamps.push(l);
                attempts.push(0);
            }
        }
        let track_ns = t.elapsed().as_nanos() as u64;

        let t = Instant::now();
        for (lamp, tries) in lamps.iter_mut().zip(attempts.iter_mut()) {
            if lamp.id.is_some() || lamp.status != TrackStatus::Tracking || *tries >= cfg.id_attempts {
                continue;
            }
            *tries += 1;
            lamp.id = request_id(bus, &frame, seq, &lamp.window, cfg.service_timeout)?;
        }
        let id_ns = t.elapsed().as_nanos() as u64;

        let mut fixes: Vec<LampFix> = Vec::new();
        for lamp in &lamps {
            if let (Some(id), Some(m), TrackStatus::Tracking) = (&lamp.id, lamp.measurement, lamp.status) {
                if !fixes.iter().any(|f| f.id == id.as_str()) {
                    fixes.push(LampFix { id: id.to_string(), img_x: m.u, img_y: m.v });
                }
            }
        }
        if fixes.len() >= 2 {
            summary.identified += 1;
            let t = Instant::now();
            let body = Body::LedInfoRequest { frame_seq: seq, frame_ts_ns: frame.timestamp_ns, lamps: fixes };
            let resp = bus.call(LED_INFO_SERVICE, body, cfg.service_timeout)?;
            let solve_ns = t.elapsed().as_nanos() as u64;
            let done = clock.now();
            if resp == (Body::LedInfoResponse { ack: true }) {
                let st = stamps.lock().expect("stamps").get(&seq).copied().unwrap_or_default();
                report.push(seq, Stage::CapturePublish, st.published.saturating_sub(st.capture));
                report.push(seq, Stage::Transport, received.saturating_sub(st.published));
                report.push(seq, Stage::Track, track_ns);
                report.push(seq, Stage::Id, id_ns);
                report.push(seq, Stage::Solve, solve_ns);
                report.push(seq, Stage::Total, done.saturating_sub(st.capture));
            }
        }
        acks.publish(msg.header.timestamp_ns, Body::Ack { seq });
    }
}

fn request_id(
    bus: &Bus,
    frame: &Frame,
    seq: u32,
    window: &SearchWindow,
    timeout: Duration,
) -> Result<Option<LedId>, MeshError> {
    let Some(rect) = window.clip(frame.width, frame.height) else {
        return Ok(None);
    };
    let patch = ImageBody::from_frame(&frame.crop(&rect))?;
    let to_u16 = |v: u32| u16::try_from(v).map_err(|_| MeshError::Malformed("patch offset".into()));
    let body = Body::IdRequest {
        frame_seq: seq,
        frame_ts_ns: frame.timestamp_ns,
        x0: to_u16(rect.x0)?,
        y0: to_u16(rect.y0)?,
        patch,
    };
    match bus.call(ID_SERVICE, body, timeout)? {
        Body::IdResponse { status: IdStatus::Found, id } => Ok(Some(LedId::new(id))),
        Body::IdResponse { .. } => Ok(None),
        other => Err(MeshError::Malformed(format!("ID service replied with tag {:#04x}", other.tag()))),
    }
}

/// Node 3: identifies the lamp in an ROI patch.
pub fn id_service(db: LuminaireDatabase) -> impl FnMut(&Message) -> Body + Send + 'static {
    move |req| {
        let Body::IdRequest { frame_ts_ns, y0, patch, .. } = &req.body else {
            return Body::Error { message: "expected an ID request".into() };
        };
        let frame = match patch.to_frame(*frame_ts_ns) {
            Ok(f) => f,
            Err(e) => return Body::Error { message: e.to_string() },
        };
        let whole = SearchWindow::new(
            frame.width as f64 / 2.0,
            frame.height as f64 / 2.0,
            frame.width as f64,
            frame.height as f64,
        );
        let result = extract_features_at(&frame, *y0 as u32, &whole, db.timing(), ThresholdPolicy::Otsu)
            .and_then(|f| match_id(&f, &db));
        match result {
            Ok(id) => Body::IdResponse { status: IdStatus::Found, id: id.to_string() },
            Err(CodecError::Ambiguous(_)) => Body::IdResponse { status: IdStatus::Ambiguous, id: String::new() },
            Err(CodecError::NoMatch) => Body::IdResponse { status: IdStatus::NoMatch, id: String::new() },
            Err(_) => Body::IdResponse { status: IdStatus::Failed, id: String::new() },
        }
    }
}

/// Node 4: solves the pose from identified lamps and publishes it.
pub fn locator_service(
    db: LuminaireDatabase,
    intr: CameraIntrinsics,
    opts: LocateOptions,
    mut location: Publisher,
    clock: Clock,
) -> impl FnMut(&Message) -> Body + Send + 'static {
    move |req| {
        let Body::LedInfoRequest { frame_seq, frame_ts_ns, lamps } = &req.body else {
            return Body::Error { message: "expected an LED info request".into() };
        };
        let observed: Vec<ObservedLamp> = lamps
            .iter()
            .filter_map(|l| {
                let rec = db.get(&LedId::new(l.id.clone()))?;
                Some(ObservedLamp::new(rec.id.clone(), rec.position, crate::PixelPoint::new(l.img_x, l.img_y)))
            })
            .collect();
        let fix = select_lamp_pair(&observed).and_then(|(a, b)| locate_with(a, b, &intr, opts));
        match fix {
            Ok(fix) => {
                let body = PositionBody {
                    x_w: fix.x_w,
                    y_w: fix.y_w,
                    z_w: fix.z_w,
                    theta: fix.theta,
                    pair: (fix.pair.0.to_string(), fix.pair.1.to_string()),
                    solve_timestamp_ns: clock.now(),
                    source_frame_seq: *frame_seq,
                };
                location.publish(*frame_ts_ns, Body::Position(body));
                Body::LedInfoResponse { ack: true }
            }
            Err(_) => Body::LedInfoResponse { ack: false },
        }
    }
}
