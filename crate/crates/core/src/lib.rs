//! Camera-based indoor positioning from rolling-shutter images of modulated
//! ceiling LEDs.

pub mod blob;
pub mod codec;
pub mod geometry;
pub mod harness;
pub mod mesh;
pub mod simulator;
pub mod tracker;
pub mod types;

pub use geometry::{CameraIntrinsics, GeometryError, ObservedLamp, PoseFix};
pub use types::{Encoding, Frame, ImagePoint, LedId, PixelPoint, PixelRect, SearchWindow, WorldPoint};
