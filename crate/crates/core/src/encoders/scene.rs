//! Procedural 8 FPS scenes: two hands and an optional object on a textured
//! background, driven by a timeline of discrete events.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, streams, uniform};
use crate::slow_path::BoxRegion;
use crate::vocab::{self, TokenId};

pub const SIDE: usize = 24;
pub const CAPTURE_FPS: f64 = 8.0;
pub const FRAME_DT: f64 = 1.0 / CAPTURE_FPS;
/// Frames per egocentric group, and per 0.5 s bundle.
pub const GROUP: usize = 4;
pub const BUNDLE_DT: f64 = 0.5;
pub const MIN_EVENT_GAP: f64 = 1.0;

const HAND_INTENSITY: f64 = 0.5;
const OBJECT_INTENSITY: f64 = 1.0;
const HALF_EXTENT: i32 = 2;
const HAND_STEP: i32 = 4;
const BACKGROUND_AMPLITUDE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    HandLeft,
    HandRight,
    Object,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    /// `(row, col)` of the center cell.
    pub center: [i32; 2],
    /// Half-height and half-width in cells.
    pub extent: [i32; 2],
    pub intensity: f64,
}

impl Primitive {
    /// Inclusive cell rectangle, clipped to the field.
    pub fn rect(&self) -> BoxRegion {
        let clip = |v: i32| v.clamp(0, SIDE as i32 - 1) as usize;
        BoxRegion {
            kind: self.kind,
            r0: clip(self.center[0] - self.extent[0]),
            c0: clip(self.center[1] - self.extent[1]),
            r1: clip(self.center[0] + self.extent[0]),
            c1: clip(self.center[1] + self.extent[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFrame {
    pub t: f64,
    /// Row-major `SIDE x SIDE` scalar image.
    pub field: Vec<f64>,
    pub scene: Vec<Primitive>,
    /// Externally supplied boxes; when present they replace the oracle detector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoxRegion>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    pub fn center(self) -> [i32; 2] {
        match self {
            Quadrant::TopLeft => [6, 6],
            Quadrant::TopRight => [6, 17],
            Quadrant::BottomLeft => [17, 6],
            Quadrant::BottomRight => [17, 17],
        }
    }

    pub fn token(self) -> TokenId {
        match self {
            Quadrant::TopLeft => vocab::TOP_LEFT,
            Quadrant::TopRight => vocab::TOP_RIGHT,
            Quadrant::BottomLeft => vocab::BOTTOM_LEFT,
            Quadrant::BottomRight => vocab::BOTTOM_RIGHT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    fn delta(self) -> [i32; 2] {
        match self {
            Direction::Up => [-1, 0],
            Direction::Down => [1, 0],
            Direction::Left => [0, -1],
            Direction::Right => [0, 1],
        }
    }

    pub fn token(self) -> TokenId {
        match self {
            Direction::Up => vocab::UP,
            Direction::Down => vocab::DOWN,
            Direction::Left => vocab::LEFTWARD,
            Direction::Right => vocab::RIGHTWARD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    ObjectEnters { quadrant: Quadrant },
    ObjectLeaves,
    HandMoves { hand: Hand, direction: Direction },
}

impl EventKind {
    /// Ground-truth narration, without the closing TURN_END.
    pub fn narration(self) -> Vec<TokenId> {
        match self {
            EventKind::ObjectEnters { quadrant } => vec![vocab::OBJECT, vocab::ENTERS, quadrant.token()],
            EventKind::ObjectLeaves => vec![vocab::OBJECT, vocab::LEAVES],
            EventKind::HandMoves { hand, direction } => {
                let h = if hand == Hand::Left { vocab::LEFT_HAND } else { vocab::RIGHT_HAND };
                vec![h, vocab::MOVES, direction.token()]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Onset in seconds, on the 0.5 s grid.
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
    pub narration: Vec<TokenId>,
}

impl Event {
    pub fn new(t: f64, kind: EventKind) -> Self {
        Self { t, kind, narration: kind.narration() }
    }

    pub fn onset_frame(&self) -> usize {
        (self.t * CAPTURE_FPS).round() as usize
    }
}

/// Scene state between events.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub left: [i32; 2],
    pub right: [i32; 2],
    pub object: Option<Quadrant>,
}

impl Default for SceneState {
    fn default() -> Self {
        Self { left: [19, 4], right: [19, 19], object: None }
    }
}

fn inside(center: [i32; 2]) -> bool {
    let lo = HALF_EXTENT;
    let hi = SIDE as i32 - 1 - HALF_EXTENT;
    (lo..=hi).contains(&center[0]) && (lo..=hi).contains(&center[1])
}

fn shifted(c: [i32; 2], dir: Direction, cells: i32) -> [i32; 2] {
    let d = dir.delta();
    [c[0] + d[0] * cells, c[1] + d[1] * cells]
}

impl SceneState {
    pub fn hand(&self, hand: Hand) -> [i32; 2] {
        if hand == Hand::Left {
            self.left
        } else {
            self.right
        }
    }

    /// Whether `kind` can happen in this state.
    pub fn allows(&self, kind: EventKind) -> bool {
        match kind {
            EventKind::ObjectEnters { .. } => self.object.is_none(),
            EventKind::ObjectLeaves => self.object.is_some(),
            EventKind::HandMoves { hand, direction } => inside(shifted(self.hand(hand), direction, HAND_STEP)),
        }
    }

    fn apply(&mut self, kind: EventKind) {
        match kind {
            EventKind::ObjectEnters { quadrant } => self.object = Some(quadrant),
            EventKind::ObjectLeaves => self.object = None,
            EventKind::HandMoves { hand, direction } => {
                let c = shifted(self.hand(hand), direction, HAND_STEP);
                if hand == Hand::Left {
                    self.left = c;
                } else {
                    self.right = c;
                }
            }
        }
    }

    /// Primitives with event `active` at fraction `k/GROUP` of its motion.
    fn primitives(&self, active: Option<(EventKind, usize)>) -> Vec<Primitive> {
        let mut left = self.left;
        let mut right = self.right;
        let mut object = self.object.map(|q| (q, OBJECT_INTENSITY));
        if let Some((kind, k)) = active {
            let frac = k as f64 / GROUP as f64;
            match kind {
                EventKind::ObjectEnters { quadrant } => object = Some((quadrant, OBJECT_INTENSITY * frac)),
                EventKind::ObjectLeaves => {
                    object = object.map(|(q, _)| (q, OBJECT_INTENSITY * (1.0 - frac)));
                }
                EventKind::HandMoves { hand, direction } => {
                    let cells = HAND_STEP * k as i32 / GROUP as i32;
                    if hand == Hand::Left {
                        left = shifted(left, direction, cells);
                    } else {
                        right = shifted(right, direction, cells);
                    }
                }
            }
        }
        let ext = [HALF_EXTENT, HALF_EXTENT];
        let mut out = vec![
            Primitive { kind: PrimitiveKind::HandLeft, center: left, extent: ext, intensity: HAND_INTENSITY },
            Primitive { kind: PrimitiveKind::HandRight, center: right, extent: ext, intensity: HAND_INTENSITY },
        ];
        if let Some((q, intensity)) = object {
            if intensity > 0.0 {
                out.push(Primitive { kind: PrimitiveKind::Object, center: q.center(), extent: ext, intensity });
            }
        }
        out
    }
}

pub fn background(seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed, streams::VIDEO);
    (0..SIDE * SIDE).map(|_| BACKGROUND_AMPLITUDE * uniform(&mut rng, -1.0, 1.0)).collect()
}

pub fn render(bg: &[f64], prims: &[Primitive]) -> Vec<f64> {
    let mut field = bg.to_vec();
    for p in prims {
        let b = p.rect();
        for r in b.r0..=b.r1 {
            for c in b.c0..=b.c1 {
                field[r * SIDE + c] += p.intensity;
            }
        }
    }
    field
}

/// Checks ordering, grid alignment, spacing and state feasibility.
pub fn validate_events(duration_s: f64, events: &[Event]) -> Result<()> {
    let mut state = SceneState::default();
    let mut prev: Option<f64> = None;
    for e in events {
        let half_steps = e.t / BUNDLE_DT;
        if e.t < 0.0 || (half_steps - half_steps.round()).abs() > 1e-9 {
            return Err(Error::Generation(format!("event at {} s is not on the 0.5 s grid", e.t)));
        }
        if e.t + BUNDLE_DT > duration_s + 1e-9 {
            return Err(Error::Generation(format!("event at {} s does not finish within {duration_s} s", e.t)));
        }
        if let Some(p) = prev {
            if e.t - p < MIN_EVENT_GAP - 1e-9 {
                return Err(Error::Generation(format!("events at {p} s and {} s are closer than 1 s", e.t)));
            }
        }
        if !state.allows(e.kind) {
            return Err(Error::Generation(format!("event {:?} at {} s is impossible in the current scene", e.kind, e.t)));
        }
        state.apply(e.kind);
        prev = Some(e.t);
    }
    Ok(())
}

/// Renders `duration_s` seconds at 8 FPS. Each event's motion spans the four
/// frames of the 0.5 s window starting at its onset.
pub fn synth_video(seed: u64, duration_s: f64, events: &[Event]) -> Result<Vec<SyntheticFrame>> {
    validate_events(duration_s, events)?;
    let n = (duration_s * CAPTURE_FPS).round() as usize;
    let bg = background(seed);
    let mut state = SceneState::default();
    let mut next = 0;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let mut active = None;
        if let Some(e) = events.get(next) {
            let f0 = e.onset_frame();
            if i >= f0 {
                let k = i - f0 + 1;
                if k >= GROUP {
                    state.apply(e.kind);
                    next += 1;
                } else {
                    active = Some((e.kind, k));
                }
            }
        }
        let scene = state.primitives(active);
        frames.push(SyntheticFrame { t: i as f64 * FRAME_DT, field: render(&bg, &scene), scene, boxes: None });
    }
    Ok(frames)
}

/// Scene state after all events with onset before `t`.
pub fn state_at(events: &[Event], t: f64) -> SceneState {
    let mut s = SceneState::default();
    for e in events.iter().filter(|e| e.t < t - 1e-9) {
        s.apply(e.kind);
    }
    s
}
