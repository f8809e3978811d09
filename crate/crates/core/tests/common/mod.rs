#![allow(dead_code)]

use rand::Rng;
use vlp_core::mesh::wire::{Body, Header, IdStatus, ImageBody, Kind, LampFix, Message, PositionBody};

fn name<R: Rng>(rng: &mut R) -> String {
    let len = rng.random_range(0..24);
    (0..len)
        .map(|_| match rng.random_range(0..4) {
            0 => '/',
            1 => 'é',
            _ => rng.random_range('a'..='z'),
        })
        .collect()
}

fn finite<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..4) {
        0 => 0.0,
        1 => rng.random_range(-1e6..1e6),
        2 => f64::MAX * rng.random_range(-1.0..1.0),
        _ => rng.random::<f64>() * 1e-300,
    }
}

fn image<R: Rng>(rng: &mut R) -> ImageBody {
    let width = rng.random_range(0..40);
    let height = rng.random_range(0..40);
    let pixels = (0..width as usize * height as usize).map(|_| rng.random()).collect();
    ImageBody { width, height, encoding: 0, pixels }
}

pub fn random_body<R: Rng>(rng: &mut R) -> Body {
    match rng.random_range(0..9) {
        0 => Body::Image(image(rng)),
        1 => Body::Position(PositionBody {
            x_w: finite(rng),
            y_w: finite(rng),
            z_w: finite(rng),
            theta: finite(rng),
            pair: (name(rng), name(rng)),
            solve_timestamp_ns: rng.random(),
            source_frame_seq: rng.random(),
        }),
        2 => Body::IdRequest {
            frame_seq: rng.random(),
            frame_ts_ns: rng.random(),
            x0: rng.random(),
            y0: rng.random(),
            patch: image(rng),
        },
        3 => Body::IdResponse {
            status: [IdStatus::Found, IdStatus::NoMatch, IdStatus::Ambiguous, IdStatus::Failed][rng.random_range(0..4)],
            id: name(rng),
        },
        4 => Body::LedInfoRequest {
            frame_seq: rng.random(),
            frame_ts_ns: rng.random(),
            lamps: (0..rng.random_range(0..6))
                .map(|_| LampFix { id: name(rng), img_x: finite(rng), img_y: finite(rng) })
                .collect(),
        },
        5 => Body::LedInfoResponse { ack: rng.random() },
        6 => Body::Ack { seq: rng.random() },
        7 => Body::EndOfStream,
        _ => Body::Error { message: name(rng) },
    }
}

pub fn random_message<R: Rng>(rng: &mut R) -> Message {
    Message {
        kind: [Kind::Topic, Kind::Request, Kind::Response][rng.random_range(0..3)],
        header: Header { name: name(rng), seq: rng.random(), timestamp_ns: rng.random() },
        body: random_body(rng),
    }
}
