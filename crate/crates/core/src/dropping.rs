//! Learned per-layer token dropping: scoring, selection, placement, and the
//! routed residual update.

use rand::seq::index::sample;
use serde::Serialize;

use crate::config::{DroppingConfig, Placement, Selection};
use crate::error::{Error, Result};
use crate::rng::{mix_all, seeded, streams};
use crate::sequence::Slot;
use crate::tensor::{Tape, Tensor, Var};

/// Routing scores of a chunk: `<w_theta, x>` for visual rows, `+inf` for
/// everything else so that text is never dropped.
pub fn routing_weights(tokens: &Tensor, w_theta: &[f64], slots: &[Slot]) -> Result<Vec<f64>> {
    if tokens.cols() != w_theta.len() || tokens.rows() != slots.len() {
        return Err(Error::Routing("routing weights need one slot per token row".into()));
    }
    Ok(slots
        .iter()
        .enumerate()
        .map(|(i, s)| if s.is_visual() { crate::tensor::kernels::dot(tokens.row(i), w_theta) } else { f64::INFINITY })
        .collect())
}

/// `ceil((1 - beta) * n)`, immune to representation error in `1 - beta`.
pub fn retained_count(n: usize, beta: f64) -> usize {
    (((1.0 - beta) * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Indices of the `k` largest weights, ties going to the lower index,
/// returned ascending.
pub fn top_k(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

/// Mask keeping the `ceil((1-beta) n)` highest weights of one frame.
pub fn select_retained(frame_weights: &[f64], beta: f64) -> Vec<bool> {
    let mut mask = vec![false; frame_weights.len()];
    for i in top_k(frame_weights, retained_count(frame_weights.len(), beta)) {
        mask[i] = true;
    }
    mask
}

/// Linear-interpolated percentile: position `beta * (n - 1)` in sorted order.
pub fn percentile_threshold(weights: &[f64], beta: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Threshold("percentile of an empty weight set".into()));
    }
    let mut s = weights.to_vec();
    s.sort_by(f64::total_cmp);
    let h = beta.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    Ok(s[lo] + (h - lo as f64) * (s[hi] - s[lo]))
}

/// Routed layer indices for a placement policy.
pub fn placement_layers(n_layers: usize, policy: Placement) -> Result<Vec<usize>> {
    let deep = |n: usize| -> Result<Vec<usize>> {
        if n < 3 {
            return Err(Error::Policy(format!("deep placement needs at least 3 layers, got {n}")));
        }
        let count = (2 * n).div_ceil(3);
        Ok((n - count..n).collect())
    };
    Ok(match policy {
        Placement::All => (0..n_layers).collect(),
        Placement::Interleaved => (1..n_layers).step_by(2).collect(),
        Placement::Deep => deep(n_layers)?,
        Placement::InterleavedAndDeep => deep(n_layers)?.into_iter().filter(|l| l % 2 == 1).collect(),
        Placement::None => Vec::new(),
    })
}

/// What a routed layer decided for one chunk.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRoutingRecord {
    pub layer: usize,
    /// Per position; `+inf` for text (serialized as `null`).
    pub weights: Vec<f64>,
    pub retained: Vec<bool>,
    /// Percentile of the visual weights at `beta`; `None` without visual tokens.
    pub threshold: Option<f64>,
}

impl LayerRoutingRecord {
    pub fn participating(&self) -> Vec<usize> {
        self.retained.iter().enumerate().filter(|(_, &r)| r).map(|(i, _)| i).collect()
    }
}

/// Contiguous runs of visual slots sharing a group id: `(start, len, group, size)`.
pub fn visual_groups(slots: &[Slot]) -> Vec<(usize, usize, u32, u32)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < slots.len() {
        if let Slot::Visual { group, size } = slots[i] {
            let start = i;
            while i < slots.len() && matches!(slots[i], Slot::Visual { group: g, .. } if g == group) {
                i += 1;
            }
            out.push((start, i - start, group, size));
        } else {
            i += 1;
        }
    }
    out
}

/// Chooses the participating rows of one routed layer.
///
/// Per-frame and random selection work group by group and need every group
/// of the chunk to be complete when `beta > 0`.
pub fn select_for_layer(slots: &[Slot], weights: &[f64], cfg: &DroppingConfig, layer: usize, seed: u64) -> Result<LayerRoutingRecord> {
    if weights.len() != slots.len() {
        return Err(Error::Routing(format!("{} routing weights for {} positions", weights.len(), slots.len())));
    }
    let mut retained: Vec<bool> = slots.iter().map(|s| !s.is_visual()).collect();
    let visual: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].is_visual()).collect();
    let vis_w: Vec<f64> = visual.iter().map(|&i| weights[i]).collect();
    let threshold = if vis_w.is_empty() { None } else { Some(percentile_threshold(&vis_w, cfg.beta)?) };
    match cfg.selection {
        Selection::GlobalPercentile => {
            for j in top_k(&vis_w, retained_count(vis_w.len(), cfg.beta)) {
                retained[visual[j]] = true;
            }
        }
        Selection::PerFrame | Selection::Random => {
            for (start, len, group, size) in visual_groups(slots) {
                let k = retained_count(len, cfg.beta);
                if len != size as usize && k < len {
                    return Err(Error::Cache(format!(
                        "visual group {group} arrived with {len} of {size} tokens; dropping needs whole groups"
                    )));
                }
                let keep = if cfg.selection == Selection::PerFrame {
                    top_k(&weights[start..start + len], k)
                } else {
                    let mut rng = seeded(mix_all(&[seed, layer as u64, group as u64]), streams::RANDOM_DROP);
                    let mut idx = sample(&mut rng, len, k).into_vec();
                    idx.sort_unstable();
                    idx
                };
                for j in keep {
                    retained[start + j] = true;
                }
            }
        }
    }
    Ok(LayerRoutingRecord { layer, weights: weights.to_vec(), retained, threshold })
}

/// Routed residual update over the participating rows.
///
/// `block` receives the gathered rows and returns `(x + a, a, m)` where `a`
/// is the attention branch and `m` the feed-forward branch computed from
/// `x + a`. Without scaling the participating rows become `(x + a) + m`,
/// exactly as in an unrouted layer; with scaling they become
/// `x + s * (a + m)`. Rows outside `participating` are copied unchanged.
pub fn apply_routed_layer(
    tape: &mut Tape,
    x: Var,
    participating: &[usize],
    scale: Option<Var>,
    block: impl FnOnce(&mut Tape, Var) -> Result<(Var, Var, Var)>,
) -> Result<Var> {
    let n = tape.value(x).rows();
    if participating.iter().any(|&i| i >= n) || participating.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Routing("participating rows must be ascending and in range".into()));
    }
    let full = participating.len() == n;
    if participating.is_empty() {
        return Ok(x);
    }
    let xs = if full { x } else { tape.gather_rows(x, participating)? };
    let (x1, a, m) = block(tape, xs)?;
    let out = match scale {
        None => tape.add(x1, m)?,
        Some(s) => {
            let f = tape.add(a, m)?;
            let f = tape.row_scale(f, s)?;
            tape.add(xs, f)?
        }
    };
    if full {
        Ok(out)
    } else {
        tape.merge_rows(x, out, participating)
    }
}
