use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use vlp_core::codec::{extract_features, match_id, ThresholdPolicy};
use vlp_core::geometry::{locate, LocateOptions};
use vlp_core::harness::locate_frame;
use vlp_core::mesh::wire::{decode, encode, Body, ImageBody, Message};
use vlp_core::simulator::{lamp_images, project, render_frame, CameraPose, RenderConfig, ScenePlatform};
use vlp_core::tracker::{detect_blobs, track_frame, TrackedLamp, TrackerConfig};
use vlp_core::{ObservedLamp, SearchWindow};

fn bench_locate(c: &mut Criterion) {
    let r = RenderConfig::compressed();
    let scene = ScenePlatform::default_scene(r.timing());
    let intr = r.intrinsics();
    let pose = CameraPose::new(7.0, -3.0, 0.0, 0.6);
    let recs = scene.luminaires.records();
    let obs: Vec<ObservedLamp> = recs[..2]
        .iter()
        .map(|rec| ObservedLamp::new(rec.id.clone(), rec.position, project(&rec.position, &pose, &intr).unwrap()))
        .collect();
    c.bench_function("locate/pair", |b| b.iter(|| locate(black_box(&obs[0]), black_box(&obs[1]), &intr).unwrap()));

    let frame = render_frame(&scene, &pose, 1.0, &r);
    let cfg = TrackerConfig::default();
    c.bench_function("locate/frame_compressed", |b| {
        b.iter(|| locate_frame(black_box(&frame), &scene.luminaires, &intr, &cfg, LocateOptions::default()).unwrap())
    });
}

fn bench_extract(c: &mut Criterion) {
    for (name, r) in [("native", RenderConfig::native()), ("compressed", RenderConfig::compressed())] {
        let scene = ScenePlatform::default_scene(r.timing());
        let pose = CameraPose::new(0.0, 0.0, 0.0, 0.0);
        let frame = render_frame(&scene, &pose, 0.0, &r);
        let lamp = lamp_images(&scene, &pose, 0.0, &r).into_iter().find(|l| l.id.as_str() == "LED1").unwrap();
        let side = 2.0 * lamp.radius + 4.0;
        let win = SearchWindow::new(lamp.center.u, lamp.center.v, side, side);
        let timing = r.timing();
        c.bench_function(&format!("extract/{name}"), |b| {
            b.iter(|| {
                let f = extract_features(black_box(&frame), &win, &timing, ThresholdPolicy::Otsu).unwrap();
                match_id(&f, &scene.luminaires).unwrap()
            })
        });
    }
}

fn bench_track(c: &mut Criterion) {
    let r = RenderConfig { band_jitter_px: 0.5, ..RenderConfig::compressed() };
    let scene = ScenePlatform::default_scene(r.timing());
    let cfg = TrackerConfig::default();
    let first = render_frame(&scene, &CameraPose::new(0.0, 0.0, 0.0, 0.0), 0.0, &r);
    let next = render_frame(&scene, &CameraPose::new(0.4, 0.0, 0.0, 0.0), 1.0, &r);
    let lamps: Vec<TrackedLamp> =
        detect_blobs(&first, &cfg).iter().map(|b| TrackedLamp::from_blob(&first, b, &cfg).unwrap()).collect();
    c.bench_function("track/frame_compressed", |b| {
        b.iter_batched(|| lamps.clone(), |l| track_frame(l, black_box(&next), &cfg).unwrap(), BatchSize::SmallInput)
    });
    c.bench_function("detect/frame_compressed", |b| b.iter(|| detect_blobs(black_box(&first), &cfg)));
}

fn bench_wire(c: &mut Criterion) {
    let r = RenderConfig::compressed();
    let scene = ScenePlatform::default_scene(r.timing());
    let frame = render_frame(&scene, &CameraPose::new(0.0, 0.0, 0.0, 0.0), 0.0, &r);
    let msg = Message::topic("camera/image", 1, frame.timestamp_ns, Body::Image(ImageBody::from_frame(&frame).unwrap()));
    let bytes = encode(&msg).unwrap();
    c.bench_function("wire/encode_800x600", |b| b.iter(|| encode(black_box(&msg)).unwrap()));
    c.bench_function("wire/decode_800x600", |b| b.iter(|| decode(black_box(&bytes)).unwrap()));
}

criterion_group!(benches, bench_locate, bench_extract, bench_track, bench_wire);
criterion_main!(benches);
