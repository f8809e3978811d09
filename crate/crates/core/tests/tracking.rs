use vlp_core::codec::{LuminaireDatabase, LuminaireRecord, Tolerances};
use vlp_core::simulator::*;
use vlp_core::tracker::*;
use vlp_core::{Frame, LedId, PixelPoint};

fn cfg() -> TrackerConfig {
    TrackerConfig::default()
}

fn render() -> RenderConfig {
    RenderConfig { band_jitter_px: 0.5, ..RenderConfig::compressed() }
}

fn scene_with(records: Vec<LuminaireRecord>, r: &RenderConfig) -> ScenePlatform {
    let db = LuminaireDatabase::new(records, Tolerances::default(), r.timing()).unwrap();
    ScenePlatform::new((100.0, 100.0), 150.0, db).unwrap()
}

fn start(frame: &Frame) -> Vec<TrackedLamp> {
    detect_blobs(frame, &cfg())
        .iter()
        .map(|b| TrackedLamp::from_blob(frame, b, &cfg()).unwrap())
        .collect()
}

fn truth(scene: &ScenePlatform, pose: &CameraPose, t: f64, r: &RenderConfig, id: &str) -> LampImage {
    lamp_images(scene, pose, t, r).into_iter().find(|l| l.id.as_str() == id).unwrap()
}

/// Assigns each tracked lamp the id of the nearest ground-truth disk.
fn label(lamps: &mut [TrackedLamp], images: &[LampImage]) {
    for lamp in lamps {
        let near = images
            .iter()
            .min_by(|a, b| a.center.distance(&lamp.position()).total_cmp(&b.center.distance(&lamp.position())))
            .unwrap();
        lamp.id = Some(near.id.clone());
    }
}

#[test]
fn detect_rois_covers_rendered_disks() {
    let r = render();
    let scene = ScenePlatform::default_scene(r.timing());
    let pose = CameraPose::new(3.0, -7.0, 0.0, 0.4);
    let frame = render_frame(&scene, &pose, 0.0, &r);
    let rois = detect_rois(&frame, &cfg());
    let visible: Vec<_> = lamp_images(&scene, &pose, 0.0, &r).into_iter().filter(|l| l.inside).collect();
    assert_eq!(rois.len(), visible.len());
    for l in &visible {
        let w = rois.iter().find(|w| w.contains(l.center)).expect("disk has a window");
        assert!(w.center().distance(&l.center) <= 1.0, "{w:?} vs {:?}", l.center);
    }
}

#[test]
fn backprojection_prefers_the_lamp() {
    let r = render();
    let scene = ScenePlatform::default_scene(r.timing());
    let pose = CameraPose::new(0.0, 0.0, 0.0, 0.0);
    let frame = render_frame(&scene, &pose, 0.0, &r);
    let blob = detect_blobs(&frame, &cfg())[0];
    let model = TargetModel::from_window(&frame, &blob.window, 32, &[]).unwrap();
    let map = backproject(&frame, &model);
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0, 0.0, 0);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let w = map.get(x, y) as f64;
            assert!((0.0..=1.0).contains(&w));
            if blob.window.contains(PixelPoint::new(x as f64, y as f64)) {
                sin += w;
                nin += 1;
            } else {
                sout += w;
                nout += 1;
            }
        }
    }
    assert!(sin / nin as f64 > sout / nout as f64);
}

#[test]
fn drifting_lamps_stay_within_two_pixels() {
    drift(render(), 200);
}

#[test]
fn drifting_lamps_native_resolution() {
    drift(RenderConfig { band_jitter_px: 0.5, ..RenderConfig::native() }, 60);
}

fn drift(r: RenderConfig, frames: usize) {
    let scene = ScenePlatform::default_scene(r.timing());
    let traj = Trajectory::line((-40.0, 0.0), (40.0, 0.0), 0.0, Trajectory::DEFAULT_SPEED).unwrap();
    let mut lamps: Vec<TrackedLamp> = Vec::new();
    let mut worst: f64 = 0.0;
    for sf in run_trajectory(&scene, &traj, &r).take(frames) {
        let t = sf.index as f64 / r.fps;
        let images = lamp_images(&scene, &sf.pose, t, &r);
        if sf.index == 0 {
            lamps = start(&sf.frame);
            assert_eq!(lamps.len(), 4);
            label(&mut lamps, &images);
            continue;
        }
        let (next, fresh) = track_frame(lamps, &sf.frame, &cfg()).unwrap();
        lamps = next;
        assert!(fresh.is_empty(), "frame {}: {fresh:?}", sf.index);
        for lamp in &lamps {
            assert_eq!(lamp.status, TrackStatus::Tracking, "frame {}", sf.index);
            assert!(lamp.last_bc >= cfg().bc_threshold);
            let gt = images.iter().find(|l| Some(&l.id) == lamp.id.as_ref()).unwrap();
            let err = lamp.window.center().distance(&gt.center);
            worst = worst.max(err);
            assert!(err <= 2.0, "frame {} {:?}: error {err}", sf.index, lamp.id);
        }
    }
    println!("worst window error {worst:.3} px");
}

#[test]
fn static_scene_windows_stay_put() {
    let r = render();
    let scene = ScenePlatform::default_scene(r.timing());
    let pose = CameraPose::new(5.0, 5.0, 0.0, 0.2);
    let mut lamps = start(&render_frame(&scene, &pose, 0.0, &r));
    let initial: Vec<PixelPoint> = lamps.iter().map(|l| l.window.center()).collect();
    for k in 1..30 {
        let frame = render_frame(&scene, &pose, k as f64, &r);
        lamps = track_frame(lamps, &frame, &cfg()).unwrap().0;
    }
    for (lamp, c0) in lamps.iter().zip(&initial) {
        assert!(lamp.window.center().distance(c0) < cfg().eps, "{:?} vs {c0:?}", lamp.window);
    }
}

/// LED1 is hidden for ten frames, then shows up `shift` window widths east
/// of where it vanished. Returns the number of frames needed to lock on
/// again within 2 px, if any.
fn occlusion_run(shift: f64, hidden_until: f64, frames: u32) -> (Option<u32>, TrackStatus) {
    let r = render();
    let base = ScenePlatform::default_scene(r.timing());
    let pose = CameraPose::new(0.0, 0.0, 0.0, 0.0);
    let led1 = truth(&base, &pose, 0.0, &r, "LED1");
    let window = 2.0 * led1.radius + 4.0;
    // working px per cm at the lamp plane for a camera at z = 0
    let k = r.f0 / (150.0 * r.dx * r.scale());
    let mut records = LuminaireDatabase::default_records();
    records[0].position.x += shift * window / k;
    let moved = scene_with(records, &r);
    let occl = vec![Occlusion { lamp_id: LedId::new("LED1"), from_s: 10.0, to_s: hidden_until }];
    let before = base.clone().with_occlusions(occl.clone());
    let after = moved.with_occlusions(occl);

    let mut lamps = start(&render_frame(&before, &pose, 0.0, &r));
    label(&mut lamps, &lamp_images(&before, &pose, 0.0, &r));
    let mut recovered = None;
    for f in 1..frames {
        let t = f as f64;
        let scene = if t < 20.0 { &before } else { &after };
        let frame = render_frame(scene, &pose, t, &r);
        lamps = track_frame(lamps, &frame, &cfg()).unwrap().0;
        let l1 = lamps.iter().find(|l| l.id.as_ref().map(|i| i.as_str()) == Some("LED1")).unwrap();
        if (10..20).contains(&f) {
            assert_ne!(l1.status, TrackStatus::Tracking, "frame {f}");
        }
        if t >= hidden_until && recovered.is_none() && l1.status == TrackStatus::Tracking {
            let gt = truth(scene, &pose, t, &r, "LED1");
            if l1.window.center().distance(&gt.center) <= 2.0 {
                recovered = Some(f - hidden_until as u32 + 1);
            }
        }
        // the other lamps never lose lock
        for l in lamps.iter().filter(|l| l.id.as_ref().map(|i| i.as_str()) != Some("LED1")) {
            assert_eq!(l.status, TrackStatus::Tracking, "frame {f} {:?}", l.id);
        }
    }
    let status = lamps.iter().find(|l| l.id.as_ref().map(|i| i.as_str()) == Some("LED1")).unwrap().status;
    (recovered, status)
}

#[test]
fn reentry_one_window_east_is_recovered() {
    let (frames, status) = occlusion_run(1.0, 20.0, 26);
    assert!(frames.is_some_and(|n| n <= 3), "{frames:?}");
    assert_eq!(status, TrackStatus::Tracking);
}

#[test]
fn brief_occlusion_recovers_in_place() {
    let (frames, status) = occlusion_run(0.0, 20.0, 24);
    assert_eq!(frames, Some(1));
    assert_eq!(status, TrackStatus::Tracking);
}

#[test]
fn vanished_lamp_becomes_lost() {
    let (frames, status) = occlusion_run(0.0, 1e9, 10 + cfg().patience + 3);
    assert_eq!(frames, None);
    assert_eq!(status, TrackStatus::Lost);
}

#[test]
fn entering_lamp_yields_one_new_roi() {
    let r = render();
    let records: Vec<_> = LuminaireDatabase::default_records().into_iter().take(3).collect();
    let scene = scene_with(records, &r);
    let traj = Trajectory::line((0.0, 100.0), (0.0, 40.0), 0.0, 1.0).unwrap();
    let mut lamps: Vec<TrackedLamp> = Vec::new();
    let mut first_inside = None;
    let mut emitted = Vec::new();
    for sf in run_trajectory(&scene, &traj, &r) {
        let t = sf.index as f64 / r.fps;
        let led2 = truth(&scene, &sf.pose, t, &r, "LED2");
        if led2.inside && first_inside.is_none() {
            first_inside = Some(sf.index);
        }
        if sf.index == 0 {
            lamps = start(&sf.frame);
            assert_eq!(lamps.len(), 2);
            continue;
        }
        let (mut next, fresh) = track_frame(lamps, &sf.frame, &cfg()).unwrap();
        for b in &fresh {
            emitted.push(sf.index);
            assert!(b.center.distance(&led2.center) <= 1.5, "{b:?} vs {:?}", led2.center);
            next.push(TrackedLamp::from_blob(&sf.frame, b, &cfg()).unwrap());
        }
        lamps = next;
    }
    let first = first_inside.expect("LED2 enters the view");
    assert!(first > 0);
    assert_eq!(emitted, vec![first]);
    assert_eq!(lamps.iter().filter(|l| l.status == TrackStatus::Tracking).count(), 3);
}
