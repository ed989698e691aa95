//! Closed-form multiply-accumulate counts for one pass over a sequence.

use serde::{Deserialize, Serialize};

use crate::config::{DroppingConfig, ModelConfig, Selection};
use crate::dropping::{placement_layers, retained_count, visual_groups};
use crate::error::Result;
use crate::sequence::Slot;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub routed: bool,
    /// Tokens entering attention and the feed-forward block.
    pub tokens: u64,
    pub projections: u64,
    pub attention: u64,
    pub ffn: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Sum over layers plus the output head. Router scoring is listed
    /// separately and not included.
    pub total: u64,
    pub per_layer: Vec<LayerFlops>,
    pub head: u64,
    pub router: u64,
    /// Extra cost of keyframe templates, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyframe_augmentation: Option<u64>,
}

/// Visual tokens kept at a routed layer for this profile.
pub fn retained_visual(profile: &[Slot], dropping: &DroppingConfig) -> u64 {
    match dropping.selection {
        Selection::GlobalPercentile => {
            retained_count(profile.iter().filter(|s| s.is_visual()).count(), dropping.beta) as u64
        }
        Selection::PerFrame | Selection::Random => visual_groups(profile)
            .iter()
            .map(|&(_, len, _, _)| retained_count(len, dropping.beta) as u64)
            .sum(),
    }
}

/// Per-layer attention + feed-forward cost with routed layers charging only
/// text and retained visual tokens.
pub fn flops_estimate(model: &ModelConfig, dropping: &DroppingConfig, profile: &[Slot]) -> Result<FlopsReport> {
    let routed = placement_layers(model.n_layers, dropping.policy)?;
    let d = model.d_model as u64;
    let hidden = (model.ffn_mult * model.d_model) as u64;
    let n_all = profile.len() as u64;
    let n_visual = profile.iter().filter(|s| s.is_visual()).count() as u64;
    let n_text = n_all - n_visual;
    let kept = retained_visual(profile, dropping);
    let mut per_layer = Vec::with_capacity(model.n_layers);
    let mut router = 0;
    for layer in 0..model.n_layers {
        let is_routed = routed.contains(&layer);
        let n = if is_routed { n_text + kept } else { n_all };
        if is_routed {
            router += n_visual * d;
        }
        let projections = 4 * n * d * d;
        // scores and weighted values over the causal prefix
        let attention = d * n * (n + 1);
        let ffn = 2 * n * d * hidden;
        per_layer.push(LayerFlops {
            layer,
            routed: is_routed,
            tokens: n,
            projections,
            attention,
            ffn,
            total: projections + attention + ffn,
        });
    }
    let head = n_all * d * model.vocab_size as u64;
    let total = per_layer.iter().map(|l| l.total).sum::<u64>() + head;
    Ok(FlopsReport { total, per_layer, head, router, keyframe_augmentation: None })
}

/// Estimate for `with_keyframes`, with the difference against the same
/// stream without keyframe templates reported as its own line.
pub fn flops_with_keyframes(
    model: &ModelConfig,
    dropping: &DroppingConfig,
    with_keyframes: &[Slot],
    without_keyframes: &[Slot],
) -> Result<FlopsReport> {
    let mut r = flops_estimate(model, dropping, with_keyframes)?;
    let base = flops_estimate(model, dropping, without_keyframes)?;
    r.keyframe_augmentation = Some(r.total.saturating_sub(base.total));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Placement;

    fn frames(n: u32) -> Vec<Slot> {
        (0..n * 10).map(|i| Slot::Visual { group: i / 10, size: 10 }).collect()
    }

    /// Counts multiply-accumulates token by token, the way a naive
    /// implementation would execute them.
    fn brute_force(model: &ModelConfig, dropping: &DroppingConfig, profile: &[Slot]) -> (u64, Vec<u64>) {
        let routed = placement_layers(model.n_layers, dropping.policy).unwrap();
        let d = model.d_model as u64;
        let f = (model.ffn_mult * model.d_model) as u64;
        let mut keep = vec![true; profile.len()];
        for (start, len, _, _) in visual_groups(profile) {
            let k = retained_count(len, dropping.beta);
            for j in k..len {
                keep[start + j] = false;
            }
        }
        let mut total = 0;
        let mut ffn = Vec::new();
        for l in 0..model.n_layers {
            let active: Vec<bool> = if routed.contains(&l) { keep.clone() } else { vec![true; profile.len()] };
            let mut layer_ffn = 0;
            let mut seen = 0u64;
            for &a in &active {
                if !a {
                    continue;
                }
                seen += 1;
                let mut ops = 0;
                for _ in 0..4 {
                    ops += d * d;
                }
                ops += 2 * seen * d;
                let mut ff = 0;
                ff += d * f;
                ff += f * d;
                layer_ffn += ff;
                total += ops + ff;
            }
            ffn.push(layer_ffn);
        }
        total += profile.len() as u64 * d * model.vocab_size as u64;
        (total, ffn)
    }

    #[test]
    fn unrouted_equivalences() {
        let m = ModelConfig::default();
        let p = frames(20);
        let none = DroppingConfig { policy: Placement::None, ..DroppingConfig::default() };
        let base = flops_estimate(&m, &none, &p).unwrap().total;
        for policy in [Placement::All, Placement::Deep, Placement::Interleaved, Placement::InterleavedAndDeep] {
            let zero = DroppingConfig { policy, beta: 0.0, ..DroppingConfig::default() };
            assert_eq!(flops_estimate(&m, &zero, &p).unwrap().total, base);
        }
        assert_eq!(brute_force(&m, &none, &p).0, base);
    }

    #[test]
    fn ffn_term_is_linear_in_width() {
        let m = ModelConfig::default();
        let m2 = ModelConfig { ffn_mult: 8, ..m.clone() };
        let p = frames(3);
        let d = DroppingConfig::default();
        let a = flops_estimate(&m, &d, &p).unwrap();
        let b = flops_estimate(&m2, &d, &p).unwrap();
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            assert_eq!(2 * x.ffn, y.ffn);
        }
    }

    #[test]
    fn interleaved_half_matches_op_counter() {
        let m = ModelConfig::default();
        let d = DroppingConfig { policy: Placement::Interleaved, beta: 0.5, ..DroppingConfig::default() };
        let p = frames(20);
        let est = flops_estimate(&m, &d, &p).unwrap();
        let (total, ffn) = brute_force(&m, &d, &p);
        assert_eq!(est.total, total);
        for l in est.per_layer.iter() {
            assert_eq!(l.ffn, ffn[l.layer]);
            if l.routed {
                assert_eq!(2 * l.ffn, est.per_layer[0].ffn);
            }
        }
    }

    #[test]
    fn keyframe_cost_is_isolated() {
        let m = ModelConfig::default();
        let d = DroppingConfig::default();
        let base = frames(4);
        let mut with = base.clone();
        with.extend((0..49).map(|i| Slot::Visual { group: 100 + i / 10, size: 10 }));
        let r = flops_with_keyframes(&m, &d, &with, &base).unwrap();
        assert_eq!(r.keyframe_augmentation, Some(r.total - flops_estimate(&m, &d, &base).unwrap().total));
        assert!(r.keyframe_augmentation.unwrap() > 0);
    }
}
