use std::time::Duration;

use vlp_core::codec::LuminaireDatabase;
use vlp_core::mesh::pipeline::{id_service, ID_SERVICE};
use vlp_core::mesh::wire::{decode, encode, IdStatus};
use vlp_core::mesh::*;
use vlp_core::simulator::*;
use vlp_core::tracker::{detect_blobs, TrackerConfig};

fn quick_line() -> Trajectory {
    Trajectory::line((-35.0, 0.0), (-25.0, 0.0), 0.0, Trajectory::DEFAULT_SPEED).unwrap()
}

#[test]
fn id_request_survives_the_wire() {
    let r = RenderConfig::compressed();
    let scene = ScenePlatform::default_scene(r.timing());
    let pose = CameraPose::new(2.0, -3.0, 0.0, 0.3);
    let frame = render_frame(&scene, &pose, 4.0, &r);
    let led1 = lamp_images(&scene, &pose, 4.0, &r).into_iter().find(|l| l.id.as_str() == "LED1").unwrap();
    let blob = detect_blobs(&frame, &TrackerConfig::default())
        .into_iter()
        .find(|b| b.window.contains(led1.center))
        .unwrap();
    let rect = blob.window.clip(frame.width, frame.height).unwrap();
    let req = Body::IdRequest {
        frame_seq: 4,
        frame_ts_ns: frame.timestamp_ns,
        x0: rect.x0 as u16,
        y0: rect.y0 as u16,
        patch: ImageBody::from_frame(&frame.crop(&rect)).unwrap(),
    };
    let bytes = encode(&Message::topic("x", 0, 0, req)).unwrap();
    let req = decode(&bytes).unwrap().body;

    let bus = Bus::new();
    let _srv = bus.serve(ID_SERVICE, id_service(LuminaireDatabase::default_table(r.timing())));
    let resp = bus.call(ID_SERVICE, req, Duration::from_secs(5)).unwrap();
    assert_eq!(resp, Body::IdResponse { status: IdStatus::Found, id: "LED1".into() });
}

#[test]
fn every_call_gets_one_response() {
    let bus = Bus::new();
    let _srv = bus.serve("count", |m| Body::Ack { seq: m.header.seq });
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let bus = bus.clone();
            std::thread::spawn(move || {
                (0..100).filter(|_| bus.call("count", Body::EndOfStream, Duration::from_secs(5)).is_ok()).count()
            })
        })
        .collect();
    let total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(total, 400);
}

fn check_run(topology: Topology, render: RenderConfig) -> PipelineOutput {
    let scene = ScenePlatform::default_scene(render.timing());
    let traj = quick_line();
    let cfg = PipelineConfig { topology, ..Default::default() };
    let out = run_pipeline(&scene, &traj, &render, &cfg).unwrap();
    assert_eq!(out.dropped_frames, 0);
    assert!(out.positions.len() as f64 >= 0.95 * out.frames() as f64, "{} of {}", out.positions.len(), out.frames());
    let mut last = None;
    for p in &out.positions {
        assert!(last.is_none_or(|l| p.source_frame_seq > l));
        last = Some(p.source_frame_seq);
        let truth = out.truth[p.source_frame_seq as usize].pose;
        let err = (p.x_w - truth.x).hypot(p.y_w - truth.y);
        assert!(err < 2.0, "frame {}: {err} cm", p.source_frame_seq);
        assert!((p.z_w - truth.z).abs() < 2.0);
    }
    assert_eq!(out.latency.fixes(), out.positions.len());
    out
}

#[test]
fn local_pipeline_tracks_the_robot() {
    check_run(Topology::Local, RenderConfig::compressed());
}

#[test]
fn split_pipeline_tracks_the_robot() {
    let out = check_run(Topology::Split, RenderConfig::compressed());
    assert!(out.wire_bytes as usize > out.frames() * 800 * 600);
}

#[test]
fn larger_frames_take_longer_to_transport() {
    let small = check_run(Topology::Split, RenderConfig::compressed());
    let large = check_run(Topology::Split, RenderConfig::native());
    let t_small = small.latency.mean_s(Stage::Transport).unwrap();
    let t_large = large.latency.mean_s(Stage::Transport).unwrap();
    assert!(t_large > t_small, "{t_large} vs {t_small}");
}

#[test]
fn same_positions_in_both_topologies() {
    let a = check_run(Topology::Local, RenderConfig::compressed());
    let b = check_run(Topology::Split, RenderConfig::compressed());
    let strip = |o: &PipelineOutput| -> Vec<(u32, f64, f64)> {
        o.positions.iter().map(|p| (p.source_frame_seq, p.x_w, p.y_w)).collect()
    };
    assert_eq!(strip(&a), strip(&b));
}
