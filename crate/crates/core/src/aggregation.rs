//! Fusion of the general-view and egocentric token streams into one set of
//! frame tokens.
//!
//! All strategies operate on whole batches of frames: row `b * m + i` is
//! token `i` of frame `b`. Every output row depends only on its own frame,
//! so fusing one frame alone gives the same values as fusing a batch.

use crate::config::{AggregationConfig, AggregationVariant, GateActivation, GateGranularity};
use crate::encoders::encode::FULL_TOKENS;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

fn strategy_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Strategy(msg.into()))
}

fn rows(tape: &Tape, v: Var) -> usize {
    tape.value(v).rows()
}

/// Convex per-row combination `w[:,0] * frm_s + w[:,1] * frm_t`.
pub fn aggregate_adaptive(tape: &mut Tape, frm_s: Var, frm_t: Var, w: Var) -> Result<Var> {
    let n = rows(tape, frm_s);
    if rows(tape, frm_t) != n || tape.value(frm_s).cols() != tape.value(frm_t).cols() {
        return strategy_err("weighted fusion needs both streams in the same token mode");
    }
    if tape.shape(w) != [n, 2] {
        return strategy_err(format!("fusion weights {:?} for {n} tokens", tape.shape(w)));
    }
    let w0 = tape.column(w, 0)?;
    let w1 = tape.column(w, 1)?;
    let a = tape.row_scale(frm_s, w0)?;
    let b = tape.row_scale(frm_t, w1)?;
    tape.add(a, b)
}

/// Sequence-wise concatenation, frame by frame: each frame's general tokens
/// followed by its egocentric tokens.
pub fn aggregate_concat(tape: &mut Tape, frm_s: Var, frm_t: Var, modes: [usize; 2], frames: usize) -> Result<Var> {
    if modes.contains(&0) {
        return strategy_err("concatenation needs a non-empty token stream on both sides");
    }
    if rows(tape, frm_s) != frames * modes[0] || rows(tape, frm_t) != frames * modes[1] {
        return strategy_err("stream row counts do not match the token modes");
    }
    let all = tape.concat_rows(&[frm_s, frm_t])?;
    let off = frames * modes[0];
    let mut perm = Vec::with_capacity(frames * (modes[0] + modes[1]));
    for b in 0..frames {
        perm.extend(b * modes[0]..(b + 1) * modes[0]);
        perm.extend(off + b * modes[1]..off + (b + 1) * modes[1]);
    }
    tape.gather_rows(all, &perm)
}

/// Position-wise sum in (10,10); CLS+CLS with the other nine passing
/// through when one side has a single token.
pub fn aggregate_addition(tape: &mut Tape, frm_s: Var, frm_t: Var, modes: [usize; 2], frames: usize) -> Result<Var> {
    if rows(tape, frm_s) != frames * modes[0] || rows(tape, frm_t) != frames * modes[1] {
        return strategy_err("stream row counts do not match the token modes");
    }
    match modes {
        [FULL_TOKENS, FULL_TOKENS] => tape.add(frm_s, frm_t),
        [FULL_TOKENS, 1] | [1, FULL_TOKENS] => {
            let (full, single) = if modes[0] == FULL_TOKENS { (frm_s, frm_t) } else { (frm_t, frm_s) };
            let cls_rows: Vec<usize> = (0..frames).map(|b| b * FULL_TOKENS).collect();
            let cls = tape.gather_rows(full, &cls_rows)?;
            let summed = if modes[0] == FULL_TOKENS { tape.add(cls, single)? } else { tape.add(single, cls)? };
            tape.merge_rows(full, summed, &cls_rows)
        }
        _ => strategy_err(format!("addition is undefined for token modes {modes:?}")),
    }
}

/// Free per-position weights, softmax-normalized, shared by every frame.
pub fn aggregate_learnable(tape: &mut Tape, frm_s: Var, frm_t: Var, logits: Var, frames: usize) -> Result<Var> {
    let w = tape.softmax(logits, 1)?;
    let per = tape.value(w).rows();
    let idx: Vec<usize> = (0..frames).flat_map(|_| 0..per).collect();
    let w = tape.gather_rows(w, &idx)?;
    aggregate_adaptive(tape, frm_s, frm_t, w)
}

#[derive(Clone, Debug, PartialEq)]
struct GateIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Trainable projections of both encoders plus the fusion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    cfg: AggregationConfig,
    proj_gen_w: ParamId,
    proj_gen_b: ParamId,
    proj_ego_w: ParamId,
    proj_ego_b: ParamId,
    gate: Option<GateIds>,
    learned: Option<ParamId>,
}

impl Aggregator {
    pub fn new(
        store: &mut ParamStore,
        cfg: &AggregationConfig,
        enc_dim: usize,
        d_model: usize,
        d_hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::check_modes(cfg)?;
        let proj_gen_w = store.add_weight("proj.general.w", enc_dim, d_model, rng);
        let proj_gen_b = store.add_zeros("proj.general.b", &[d_model]);
        let proj_ego_w = store.add_weight("proj.ego.w", enc_dim, d_model, rng);
        let proj_ego_b = store.add_zeros("proj.ego.b", &[d_model]);
        let mut gate = None;
        let mut learned = None;
        match cfg.variant {
            AggregationVariant::AdaptiveRouting => {
                let out = match cfg.gate {
                    GateGranularity::PerPosition => FULL_TOKENS * 2,
                    GateGranularity::PerFrame => 2,
                };
                gate = Some(GateIds {
                    w1: store.add_weight("gate.w1", d_model, d_hidden, rng),
                    b1: store.add_zeros("gate.b1", &[d_hidden]),
                    w2: store.add_weight("gate.w2", d_hidden, out, rng),
                    b2: store.add_zeros("gate.b2", &[out]),
                });
            }
            AggregationVariant::LearnableWeighting => {
                learned = Some(store.add_zeros("fusion.logits", &[FULL_TOKENS, 2]));
            }
            AggregationVariant::Concat | AggregationVariant::Addition => {}
        }
        Ok(Self { cfg: cfg.clone(), proj_gen_w, proj_gen_b, proj_ego_w, proj_ego_b, gate, learned })
    }

    fn check_modes(cfg: &AggregationConfig) -> Result<()> {
        let needs_full = matches!(cfg.variant, AggregationVariant::AdaptiveRouting | AggregationVariant::LearnableWeighting);
        if needs_full && cfg.modes != [FULL_TOKENS, FULL_TOKENS] {
            return strategy_err(format!("{:?} requires token modes [10, 10]", cfg.variant));
        }
        if cfg.variant == AggregationVariant::Addition && cfg.modes == [1, 1] {
            return strategy_err("addition is undefined for token modes [1, 1]");
        }
        Ok(())
    }

    pub fn config(&self) -> &AggregationConfig {
        &self.cfg
    }

    pub fn tokens_per_frame(&self) -> usize {
        match self.cfg.variant {
            AggregationVariant::Concat => self.cfg.modes[0] + self.cfg.modes[1],
            _ => FULL_TOKENS.min(self.cfg.modes[0].max(self.cfg.modes[1])),
        }
    }

    pub fn gate_params(&self) -> Option<[ParamId; 4]> {
        self.gate.as_ref().map(|g| [g.w1, g.b1, g.w2, g.b2])
    }

    pub fn learned_logits(&self) -> Option<ParamId> {
        self.learned
    }

    pub fn project_general(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, pv[self.proj_gen_w.0], pv[self.proj_gen_b.0])
    }

    pub fn project_ego(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, pv[self.proj_ego_w.0], pv[self.proj_ego_b.0])
    }

    /// Gate weights `[frames * 10 x 2]` from the per-frame guidance rows.
    pub fn route_weights(&self, tape: &mut Tape, pv: &[Var], vg: Var) -> Result<Var> {
        let g = self.gate.as_ref().ok_or_else(|| Error::Strategy("no gate for this strategy".into()))?;
        route_weights(tape, vg, [pv[g.w1.0], pv[g.b1.0], pv[g.w2.0], pv[g.b2.0]], self.cfg.activation, self.cfg.gate)
    }

    /// Fuses raw encoder tokens of `frames` frames into model-width frame
    /// tokens, `[frames * tokens_per_frame x d_model]`.
    pub fn forward(&self, tape: &mut Tape, pv: &[Var], general: Var, ego: Var, frames: usize) -> Result<Var> {
        let gs = self.project_general(tape, pv, general)?;
        let es = self.project_ego(tape, pv, ego)?;
        let modes = self.cfg.modes;
        match self.cfg.variant {
            AggregationVariant::Concat => aggregate_concat(tape, gs, es, modes, frames),
            AggregationVariant::Addition => aggregate_addition(tape, gs, es, modes, frames),
            AggregationVariant::LearnableWeighting => {
                let logits = pv[self.learned.expect("learnable logits").0];
                aggregate_learnable(tape, gs, es, logits, frames)
            }
            AggregationVariant::AdaptiveRouting => {
                let cls: Vec<usize> = (0..frames).map(|b| b * FULL_TOKENS).collect();
                let vg = tape.gather_rows(gs, &cls)?;
                let w = self.route_weights(tape, pv, vg)?;
                aggregate_adaptive(tape, gs, es, w)
            }
        }
    }
}

/// `softmax(W2 act(W1 vg + b1) + b2)`, normalized over the two streams.
/// Per-position gates yield one weight pair per token; per-frame gates one
/// pair repeated over the frame.
pub fn route_weights(
    tape: &mut Tape,
    vg: Var,
    [w1, b1, w2, b2]: [Var; 4],
    activation: GateActivation,
    granularity: GateGranularity,
) -> Result<Var> {
    let frames = tape.value(vg).rows();
    let h = tape.linear(vg, w1, b1)?;
    let h = match activation {
        GateActivation::Sigmoid => tape.sigmoid(h)?,
        GateActivation::Relu => tape.relu(h)?,
    };
    let logits = tape.linear(h, w2, b2)?;
    match granularity {
        GateGranularity::PerPosition => {
            let l = tape.reshape(logits, &[frames * FULL_TOKENS, 2])?;
            tape.softmax(l, 1)
        }
        GateGranularity::PerFrame => {
            let w = tape.softmax(logits, 1)?;
            let idx: Vec<usize> = (0..frames).flat_map(|b| std::iter::repeat_n(b, FULL_TOKENS)).collect();
            tape.gather_rows(w, &idx)
        }
    }
}

/// Gate weights for concrete tensors; convenience for inspection and tests.
pub fn route_weights_value(
    vg: &Tensor,
    params: [&Tensor; 4],
    activation: GateActivation,
    granularity: GateGranularity,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let vg = tape.input(vg.clone());
    let p = params.map(|t| tape.input(t.clone()));
    let w = route_weights(&mut tape, vg, p, activation, granularity)?;
    Ok(tape.value(w).clone())
}
