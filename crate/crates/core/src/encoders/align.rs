use crate::error::{Error, Result};
use crate::slow_path::{detect_boxes_synthetic, BoxRegion};
use crate::tensor::Tensor;

use super::encode::SyntheticEncoders;
use super::scene::{SyntheticFrame, BUNDLE_DT, CAPTURE_FPS, FRAME_DT, GROUP};

/// One aligned 0.5 s unit of both encoder streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub index: usize,
    /// Start of the 0.5 s window, in seconds from the stream start.
    pub timestamp: f64,
    pub general: Tensor,
    pub ego: Tensor,
    /// Field of the general (last) frame; the patch grid is derived on demand.
    pub field: Vec<f64>,
    pub boxes: Vec<BoxRegion>,
}

impl FrameBundle {
    pub fn cls(&self) -> &[f64] {
        self.general.row(0)
    }

    pub fn patch_grid(&self, enc: &SyntheticEncoders) -> Result<Tensor> {
        enc.patch_grid(&self.field)
    }
}

/// How bundle boxes are obtained when a frame carries none.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxSource {
    Oracle,
    Jittered { seed: u64 },
}

/// Number of whole seconds kept after trimming the tail.
pub fn whole_seconds(n_frames: usize) -> usize {
    n_frames / CAPTURE_FPS as usize
}

pub fn check_spacing(frames: &[SyntheticFrame]) -> Result<()> {
    let t0 = frames.first().map_or(0.0, |f| f.t);
    for (i, f) in frames.iter().enumerate() {
        if (f.t - (t0 + i as f64 * FRAME_DT)).abs() > 1e-6 {
            return Err(Error::Stream(format!("frame {i} at {} s breaks the 8 FPS spacing", f.t)));
        }
    }
    Ok(())
}

/// Encodes one 4-frame window.
pub fn make_bundle(
    enc: &SyntheticEncoders,
    index: usize,
    timestamp: f64,
    group: &[&SyntheticFrame],
    modes: [usize; 2],
    boxes: BoxSource,
) -> Result<FrameBundle> {
    if group.len() != GROUP {
        return Err(Error::Grouping(group.len()));
    }
    let last = group[GROUP - 1];
    let general = enc.encode_general(&last.field, modes[0])?;
    let ego = enc.encode_egocentric(group, modes[1])?;
    let boxes = match &last.boxes {
        Some(b) => b.clone(),
        None => match boxes {
            BoxSource::Oracle => detect_boxes_synthetic(last, None),
            BoxSource::Jittered { seed } => detect_boxes_synthetic(last, Some(crate::rng::mix_all(&[seed, index as u64]))),
        },
    };
    Ok(FrameBundle { index, timestamp, general, ego, field: last.field.clone(), boxes })
}

/// Cuts an 8 FPS stream into 0.5 s bundles, dropping any trailing partial
/// second.
pub fn align_streams(
    enc: &SyntheticEncoders,
    frames: &[SyntheticFrame],
    modes: [usize; 2],
    boxes: BoxSource,
) -> Result<Vec<FrameBundle>> {
    let secs = whole_seconds(frames.len());
    if secs == 0 {
        return Err(Error::EmptyStream(format!("{} frames is under one second", frames.len())));
    }
    check_spacing(frames)?;
    let t0 = frames[0].t;
    let n_bundles = secs * 2;
    (0..n_bundles)
        .map(|b| {
            let group: Vec<&SyntheticFrame> = frames[b * GROUP..(b + 1) * GROUP].iter().collect();
            make_bundle(enc, b, t0 + b as f64 * BUNDLE_DT, &group, modes, boxes)
        })
        .collect()
}
