//! Layout of the interleaved stream the language model reads, with the
//! per-position streaming and language-model supervision.
//!
//! A silent frame contributes its visual tokens followed by `FRAME_SEP`. A
//! responding frame contributes its visual tokens, then either a bare
//! `RESPOND` or the keyframe template (which ends in `RESPOND`), then the
//! response words and `TURN_END`. The determination for a frame is read at
//! its last visual token.

use crate::config::SlowPathConfig;
use crate::error::{Error, Result};
use crate::slow_path::{template_layout, TemplateItem};
use crate::vocab::{self, TokenId};

/// A concrete element, used where visual rows are already materialized.
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceElement {
    Visual(Vec<f64>),
    Token(TokenId),
}

impl SequenceElement {
    pub fn token(&self) -> Option<TokenId> {
        match self {
            SequenceElement::Token(t) => Some(*t),
            SequenceElement::Visual(_) => None,
        }
    }
}

/// Role of one position. Visual slots carry the dropping group they belong
/// to and that group's size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Visual { group: u32, size: u32 },
    Token(TokenId),
}

impl Slot {
    pub fn is_visual(&self) -> bool {
        matches!(self, Slot::Visual { .. })
    }
}

/// Where a visual slot's input row comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualRef {
    /// Row `row` of the aggregated tokens of bundle `bundle`.
    Frame { bundle: usize, row: usize },
    Template { bundle: usize, item: TemplateItem },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionKind {
    /// Silence-or-respond determination.
    Streaming,
    /// Next response token.
    Lm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Supervision {
    pub pos: usize,
    pub target: TokenId,
    pub kind: SupervisionKind,
    /// The supervised turn was deliberately corrupted.
    pub corrupted: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodePlan {
    pub slots: Vec<Slot>,
    /// One entry per visual slot, in sequence order.
    pub visual: Vec<VisualRef>,
    pub supervision: Vec<Supervision>,
    /// Determination position of each bundle.
    pub determinations: Vec<usize>,
    next_group: u32,
}

impl EpisodePlan {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `s` and `l` flags per position.
    pub fn flags(&self) -> (Vec<bool>, Vec<bool>) {
        let mut s = vec![false; self.len()];
        let mut l = vec![false; self.len()];
        for sup in &self.supervision {
            match sup.kind {
                SupervisionKind::Streaming => s[sup.pos] = true,
                SupervisionKind::Lm => l[sup.pos] = true,
            }
        }
        (s, l)
    }

    pub fn push_token(&mut self, t: TokenId) -> usize {
        self.slots.push(Slot::Token(t));
        self.slots.len() - 1
    }

    pub fn push_tokens(&mut self, ts: &[TokenId]) {
        for &t in ts {
            self.push_token(t);
        }
    }

    fn push_group(&mut self, refs: impl ExactSizeIterator<Item = VisualRef>) -> usize {
        let group = self.next_group;
        self.next_group += 1;
        let size = refs.len() as u32;
        for r in refs {
            self.slots.push(Slot::Visual { group, size });
            self.visual.push(r);
        }
        self.slots.len() - 1
    }

    /// Appends a frame's visual tokens and returns its determination position.
    pub fn push_frame(&mut self, bundle: usize, n_tokens: usize) -> usize {
        let last = self.push_group((0..n_tokens).map(|row| VisualRef::Frame { bundle, row }));
        self.determinations.push(last);
        last
    }

    /// Appends the keyframe template; the final slot is `RESPOND`.
    pub fn push_template(&mut self, bundle: usize, n_tokens: usize, cfg: &SlowPathConfig) -> usize {
        let items = template_layout(cfg, n_tokens);
        let mut i = 0;
        while i < items.len() {
            match items[i].group_key() {
                None => {
                    if let TemplateItem::Token(t) = items[i] {
                        self.push_token(t);
                    }
                    i += 1;
                }
                Some(key) => {
                    let start = i;
                    while i < items.len() && items[i].group_key() == Some(key) {
                        i += 1;
                    }
                    let group: Vec<VisualRef> =
                        items[start..i].iter().map(|&item| VisualRef::Template { bundle, item }).collect();
                    self.push_group(group.into_iter());
                }
            }
        }
        self.slots.len() - 1
    }

    pub fn supervise(&mut self, pos: usize, target: TokenId, kind: SupervisionKind, corrupted: bool) {
        self.supervision.push(Supervision { pos, target, kind, corrupted });
    }

    pub fn user_query(&mut self, tokens: &[TokenId]) {
        self.push_token(vocab::USER_TAG);
        self.push_tokens(tokens);
    }

    /// Response words after `RESPOND` at `trigger`, with LM supervision.
    pub fn push_response(&mut self, trigger: usize, words: &[TokenId], corrupted: bool) {
        let mut prev = trigger;
        for &w in words.iter().chain(std::iter::once(&vocab::TURN_END)) {
            self.supervise(prev, w, SupervisionKind::Lm, corrupted);
            prev = self.push_token(w);
        }
    }
}

/// A ground-truth answer at a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnSpec {
    pub bundle: usize,
    pub response: Vec<TokenId>,
    pub corrupted: bool,
}

/// A user query binding just before bundle `bundle`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySpec {
    pub bundle: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutOptions {
    pub frame_tokens: usize,
    /// Template inserted at responding frames, when enabled.
    pub slow_path: Option<SlowPathConfig>,
    pub supervise_after_query: bool,
    pub supervise_turn_end: bool,
}

/// Teacher-forcing layout of a whole episode.
pub fn build_plan(n_bundles: usize, turns: &[TurnSpec], queries: &[QuerySpec], opts: &LayoutOptions) -> Result<EpisodePlan> {
    let mut by_bundle: Vec<Option<&TurnSpec>> = vec![None; n_bundles];
    for t in turns {
        let slot = by_bundle
            .get_mut(t.bundle)
            .ok_or_else(|| Error::Supervision(format!("turn at bundle {} of {n_bundles}", t.bundle)))?;
        if slot.is_some() {
            return Err(Error::Supervision(format!("two turns at bundle {}", t.bundle)));
        }
        *slot = Some(t);
    }
    let mut plan = EpisodePlan::default();
    let mut awaiting_answer = false;
    let mut after_turn: Option<usize> = None;
    for b in 0..n_bundles {
        for q in queries.iter().filter(|q| q.bundle == b) {
            plan.user_query(&q.tokens);
            awaiting_answer = true;
        }
        if let Some(p) = after_turn.take() {
            if opts.supervise_turn_end {
                plan.supervise(p, vocab::SILENCE, SupervisionKind::Streaming, false);
            }
        }
        let det = plan.push_frame(b, opts.frame_tokens);
        match by_bundle[b] {
            Some(turn) => {
                plan.supervise(det, vocab::RESPOND, SupervisionKind::Streaming, false);
                let trigger = match &opts.slow_path {
                    Some(cfg) => plan.push_template(b, opts.frame_tokens, cfg),
                    None => plan.push_token(vocab::RESPOND),
                };
                plan.push_response(trigger, &turn.response, turn.corrupted);
                after_turn = Some(plan.len() - 1);
                awaiting_answer = false;
            }
            None => {
                if !awaiting_answer || opts.supervise_after_query {
                    plan.supervise(det, vocab::SILENCE, SupervisionKind::Streaming, false);
                }
                plan.push_token(vocab::FRAME_SEP);
            }
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(slow: bool) -> LayoutOptions {
        LayoutOptions {
            frame_tokens: 10,
            slow_path: slow.then(SlowPathConfig::default),
            supervise_after_query: true,
            supervise_turn_end: false,
        }
    }

    #[test]
    fn silent_frames_take_eleven_positions() {
        let p = build_plan(3, &[], &[], &opts(true)).unwrap();
        assert_eq!(p.len(), 33);
        assert_eq!(p.determinations, vec![9, 20, 31]);
        assert!(p.supervision.iter().all(|s| s.target == vocab::SILENCE));
    }

    #[test]
    fn responding_frame_layout() {
        let turn = TurnSpec { bundle: 1, response: vec![vocab::OBJECT, vocab::LEAVES], corrupted: false };
        let p = build_plan(2, std::slice::from_ref(&turn), &[], &opts(false)).unwrap();
        // frame0 + sep, frame1, RESPOND, object, leaves, TURN_END
        assert_eq!(p.len(), 11 + 10 + 4);
        assert_eq!(p.slots[21], Slot::Token(vocab::RESPOND));
        let lm: Vec<_> = p.supervision.iter().filter(|s| s.kind == SupervisionKind::Lm).collect();
        assert_eq!(lm.len(), 3);
        assert_eq!((lm[0].pos, lm[0].target), (21, vocab::OBJECT));
        assert_eq!((lm[2].pos, lm[2].target), (23, vocab::TURN_END));
        let (s, l) = p.flags();
        assert!(s.iter().zip(&l).all(|(a, b)| !(*a && *b)));

        let p = build_plan(2, &[turn], &[], &opts(true)).unwrap();
        let template = 1 + 10 + 40 + 2 + 3 + 1;
        assert_eq!(p.len(), 11 + 10 + template + 3);
        let visual = p.slots.iter().filter(|s| s.is_visual()).count();
        assert_eq!(visual, 20 + 49);
        assert_eq!(p.visual.len(), visual);
    }

    #[test]
    fn groups_are_contiguous_and_sized() {
        let turn = TurnSpec { bundle: 0, response: vec![], corrupted: false };
        let p = build_plan(2, &[turn], &[], &opts(true)).unwrap();
        let mut sizes = std::collections::BTreeMap::<u32, (u32, u32)>::new();
        for s in &p.slots {
            if let Slot::Visual { group, size } = s {
                let e = sizes.entry(*group).or_insert((*size, 0));
                e.1 += 1;
            }
        }
        let got: Vec<(u32, u32)> = sizes.values().copied().collect();
        assert_eq!(got, vec![(10, 10), (10, 10), (9, 9), (9, 9), (9, 9), (9, 9), (3, 3), (10, 10)]);
    }

    #[test]
    fn queries_bind_before_their_frame() {
        let q = QuerySpec { bundle: 1, tokens: vec![vocab::WHERE, vocab::OBJECT] };
        let p = build_plan(2, &[], &[q], &opts(false)).unwrap();
        assert_eq!(&p.slots[11..14], &[Slot::Token(vocab::USER_TAG), Slot::Token(vocab::WHERE), Slot::Token(vocab::OBJECT)]);
        let mut o = opts(false);
        o.supervise_after_query = false;
        let q = QuerySpec { bundle: 0, tokens: vec![vocab::WHERE] };
        let p = build_plan(2, &[], &[q], &o).unwrap();
        assert_eq!(p.supervision.len(), 0);
    }

    #[test]
    fn duplicate_turns_rejected() {
        let t = TurnSpec { bundle: 0, response: vec![], corrupted: false };
        assert!(matches!(build_plan(1, &[t.clone(), t], &[], &opts(false)), Err(Error::Supervision(_))));
    }
}
