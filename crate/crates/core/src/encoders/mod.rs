//! Synthetic video, the two frozen encoders, and dual-rate alignment.

pub mod align;
pub mod encode;
pub mod scene;
pub mod stream_file;

pub use align::{align_streams, make_bundle, BoxSource, FrameBundle};
pub use encode::SyntheticEncoders;
pub use scene::{synth_video, Event, EventKind, SyntheticFrame};
