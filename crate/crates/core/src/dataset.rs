//! Synthetic episodes with ground-truth turns, dialogue augmentations, and
//! JSON-lines corpus files.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DatasetConfig;
use crate::encoders::align::whole_seconds;
use crate::encoders::scene::{
    state_at, synth_video, Direction, Event, EventKind, Hand, Quadrant, SceneState, SyntheticFrame, BUNDLE_DT,
    FRAME_DT, GROUP, MIN_EVENT_GAP,
};
use crate::error::{Error, Result};
use crate::params::hex;
use crate::rng::{mix_all, seeded, streams, SeededRng};
use crate::sequence::{QuerySpec, TurnSpec};
use crate::vocab::{self, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStrategy {
    CorruptMessage,
    TemporalJitter,
    DropMessage,
}

impl AugmentStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "corrupt_message" => Ok(Self::CorruptMessage),
            "temporal_jitter" => Ok(Self::TemporalJitter),
            "drop_message" => Ok(Self::DropMessage),
            other => Err(Error::Config(format!("unknown augmentation strategy {other:?}"))),
        }
    }
}

/// One expected assistant turn. Narration turns have no query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_time: Option<f64>,
    pub response: Vec<TokenId>,
    pub response_time: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub corrupted: bool,
}

/// Frame-level edits applied after rendering, in order. Indices are frame
/// indices and always a multiple of the group size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrameEdit {
    /// Four copies of the frame before `at` (or of frame 0).
    Insert { at: usize },
    Delete { at: usize },
    /// The four frames at `at` take the content of the four at `from`.
    Replace { at: usize, from: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSample {
    pub id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub events: Vec<Event>,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frame_edits: Vec<FrameEdit>,
    pub config_hash: String,
}

impl StreamSample {
    /// 8 FPS frames after edits, re-stamped on the regular grid.
    pub fn frames(&self) -> Result<Vec<SyntheticFrame>> {
        let mut frames = synth_video(self.seed, self.duration_s, &self.events)?;
        for e in &self.frame_edits {
            match *e {
                FrameEdit::Insert { at } => {
                    let src = frames[at.saturating_sub(1).min(frames.len() - 1)].clone();
                    for _ in 0..GROUP {
                        frames.insert(at, src.clone());
                    }
                }
                FrameEdit::Delete { at } => {
                    frames.drain(at..at + GROUP);
                }
                FrameEdit::Replace { at, from } => {
                    for k in 0..GROUP {
                        frames[at + k] = frames[from + k].clone();
                    }
                }
            }
        }
        for (i, f) in frames.iter_mut().enumerate() {
            f.t = i as f64 * FRAME_DT;
        }
        Ok(frames)
    }

    /// Frame count after edits, without rendering.
    pub fn n_frames(&self) -> usize {
        let base = (self.duration_s * 8.0).round() as usize;
        self.frame_edits.iter().fold(base, |n, e| match e {
            FrameEdit::Insert { .. } => n + GROUP,
            FrameEdit::Delete { .. } => n - GROUP,
            FrameEdit::Replace { .. } => n,
        })
    }

    /// Bundles kept after trimming the partial final second.
    pub fn n_bundles(&self) -> usize {
        whole_seconds(self.n_frames()) * 2
    }

    pub fn stream_end(&self) -> f64 {
        self.n_bundles() as f64 * BUNDLE_DT
    }

    pub fn turn_specs(&self) -> (Vec<TurnSpec>, Vec<QuerySpec>) {
        let mut turns = Vec::new();
        let mut queries = Vec::new();
        for t in &self.turns {
            let bundle = bundle_of(t.response_time);
            turns.push(TurnSpec { bundle, response: t.response.clone(), corrupted: t.corrupted });
            if let Some(qt) = t.query_time {
                queries.push(QuerySpec { bundle: bundle_of_query(qt), tokens: t.query.clone() });
            }
        }
        (turns, queries)
    }

    pub fn expected_times(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.response_time).collect()
    }
}

pub fn bundle_of(t: f64) -> usize {
    (t / BUNDLE_DT).round() as usize
}

/// First bundle whose window starts at or after `t`.
pub fn bundle_of_query(t: f64) -> usize {
    (t / BUNDLE_DT - 1e-9).ceil().max(0.0) as usize
}

fn random_event(rng: &mut SeededRng, state: &SceneState) -> EventKind {
    let mut options = Vec::new();
    if state.object.is_none() {
        options.extend(Quadrant::ALL.map(|quadrant| EventKind::ObjectEnters { quadrant }));
    } else {
        options.push(EventKind::ObjectLeaves);
    }
    for hand in [Hand::Left, Hand::Right] {
        for direction in Direction::ALL {
            let k = EventKind::HandMoves { hand, direction };
            if state.allows(k) {
                options.push(k);
            }
        }
    }
    *options.choose(rng).expect("entering or leaving is always possible")
}

/// Answer to a location query in scene `state`.
pub fn location_answer(state: &SceneState) -> Vec<TokenId> {
    match state.object {
        Some(q) => vec![vocab::OBJECT, vocab::IS, q.token()],
        None => vec![vocab::NOTHING, vocab::HERE],
    }
}

pub const LOCATION_QUERY: [TokenId; 2] = [vocab::WHERE, vocab::OBJECT];

/// One episode. Events are drawn per 0.5 s slot with probability
/// `event_rate * 0.5`, respecting the minimum gap; queries land on bundles
/// free of events.
pub fn generate_episode(id: String, seed: u64, cfg: &DatasetConfig, config_hash: &str) -> Result<StreamSample> {
    let mut rng = seeded(seed, streams::DATASET);
    let n_bundles = whole_seconds((cfg.duration_s * 8.0).round() as usize) * 2;
    let mut events: Vec<Event> = Vec::new();
    let mut state = SceneState::default();
    for b in 1..n_bundles {
        let t = b as f64 * BUNDLE_DT;
        if events.last().is_some_and(|e| t - e.t < MIN_EVENT_GAP - 1e-9) {
            continue;
        }
        if rng.random::<f64>() < cfg.event_rate * BUNDLE_DT {
            let kind = random_event(&mut rng, &state);
            events.push(Event::new(t, kind));
            state = state_at(&events, t + BUNDLE_DT);
        }
    }
    let mut turns: Vec<Turn> = events
        .iter()
        .map(|e| Turn { query: Vec::new(), query_time: None, response: e.narration.clone(), response_time: e.t, corrupted: false })
        .collect();
    if cfg.query_rate > 0.0 {
        for b in 1..n_bundles {
            let t = b as f64 * BUNDLE_DT;
            if turns.iter().any(|x| bundle_of(x.response_time) == b) {
                continue;
            }
            if rng.random::<f64>() < cfg.query_rate {
                turns.push(Turn {
                    query: LOCATION_QUERY.to_vec(),
                    query_time: Some(t),
                    response: location_answer(&state_at(&events, t)),
                    response_time: t,
                    corrupted: false,
                });
            }
        }
        turns.sort_by(|a, b| a.response_time.total_cmp(&b.response_time));
    }
    Ok(StreamSample { id, seed, duration_s: cfg.duration_s, events, turns, frame_edits: Vec::new(), config_hash: config_hash.into() })
}

/// Deterministic corpus. A fraction `augment_prob` of episodes receives one
/// of the configured augmentations.
pub fn generate_dataset(seed: u64, n_episodes: usize, cfg: &DatasetConfig, vocab_size: usize, config_hash: &str) -> Result<Vec<StreamSample>> {
    if !(0.0..=1.0 / MIN_EVENT_GAP).contains(&cfg.event_rate) {
        return Err(Error::Generation(format!(
            "event rate {} per second cannot be met with events at least {MIN_EVENT_GAP} s apart",
            cfg.event_rate
        )));
    }
    if cfg.duration_s < 1.0 {
        return Err(Error::Generation(format!("episodes of {} s are shorter than one second", cfg.duration_s)));
    }
    let strategies = cfg.augment.iter().map(|s| AugmentStrategy::parse(s)).collect::<Result<Vec<_>>>()?;
    let mut pick = seeded(seed, streams::AUGMENT);
    (0..n_episodes)
        .map(|i| {
            let ep_seed = mix_all(&[seed, i as u64]);
            let s = generate_episode(format!("ep{i:05}"), ep_seed, cfg, config_hash)?;
            if !strategies.is_empty() && pick.random::<f64>() < cfg.augment_prob {
                let strat = *strategies.choose(&mut pick).expect("non-empty");
                augment_dialogue(&s, strat, mix_all(&[ep_seed, 1]), vocab_size)
            } else {
                Ok(s)
            }
        })
        .collect()
}

/// Bundles with no event motion and no turn.
fn quiet_bundles(s: &StreamSample) -> Vec<usize> {
    (1..s.n_bundles())
        .filter(|&b| {
            !s.events.iter().any(|e| bundle_of(e.t) == b)
                && !s.turns.iter().any(|t| bundle_of(t.response_time) == b || t.query_time.is_some_and(|q| bundle_of_query(q) == b))
        })
        .collect()
}

fn shift_turns(s: &mut StreamSample, from_bundle: usize, dt: f64) {
    for t in &mut s.turns {
        if bundle_of(t.response_time) >= from_bundle {
            t.response_time += dt;
            if let Some(q) = t.query_time.as_mut() {
                *q += dt;
            }
        }
    }
}

/// Applies one perturbation. Samples with nothing to perturb are returned
/// unchanged.
pub fn augment_dialogue(sample: &StreamSample, strategy: AugmentStrategy, seed: u64, vocab_size: usize) -> Result<StreamSample> {
    let mut rng = seeded(seed, streams::AUGMENT);
    let mut s = sample.clone();
    match strategy {
        AugmentStrategy::DropMessage => {
            if !s.turns.is_empty() {
                let i = rng.random_range(0..s.turns.len());
                s.turns.remove(i);
            }
        }
        AugmentStrategy::CorruptMessage => {
            let candidates: Vec<usize> = (0..s.turns.len()).filter(|&i| !s.turns[i].response.is_empty()).collect();
            if let Some(&i) = candidates.choose(&mut rng) {
                let fill = vocab::filler_range(vocab_size);
                let turn = &mut s.turns[i];
                for w in turn.response.iter_mut() {
                    *w = if fill.is_empty() {
                        let mut r = *w;
                        while r == *w {
                            r = rng.random_range(vocab::N_SPECIAL..vocab::MIN_VOCAB as TokenId);
                        }
                        r
                    } else {
                        rng.random_range(fill.clone())
                    };
                }
                turn.corrupted = true;
            }
        }
        AugmentStrategy::TemporalJitter => {
            let n = s.n_bundles();
            match rng.random_range(0..3u8) {
                0 => {
                    let b = rng.random_range(1..n);
                    s.frame_edits.push(FrameEdit::Insert { at: b * GROUP });
                    shift_turns(&mut s, b, BUNDLE_DT);
                }
                kind => {
                    let quiet = quiet_bundles(&s);
                    if let Some(&b) = quiet.choose(&mut rng) {
                        if kind == 1 {
                            s.frame_edits.push(FrameEdit::Delete { at: b * GROUP });
                            shift_turns(&mut s, b, -BUNDLE_DT);
                        } else {
                            let others: Vec<usize> = quiet.iter().copied().filter(|&o| o != b).collect();
                            if let Some(&o) = others.choose(&mut rng) {
                                s.frame_edits.push(FrameEdit::Replace { at: b * GROUP, from: o * GROUP });
                            }
                        }
                    }
                }
            }
            let end = s.stream_end();
            s.turns.retain(|t| t.response_time < end - 1e-9);
        }
    }
    Ok(s)
}

pub fn to_jsonl(samples: &[StreamSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<StreamSample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n_episodes: usize,
    pub n_turns: usize,
    pub n_determinations: usize,
    pub seed: u64,
    pub config_hash: String,
    pub corpus_file: String,
    pub corpus_sha256: String,
}

/// Writes `<dir>/episodes.jsonl` and `<dir>/manifest.json`.
pub fn write_dataset(dir: &Path, samples: &[StreamSample], seed: u64, config_hash: &str) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let body = to_jsonl(samples)?;
    let corpus_file = "episodes.jsonl".to_string();
    fs::write(dir.join(&corpus_file), &body)?;
    let manifest = DatasetManifest {
        n_episodes: samples.len(),
        n_turns: samples.iter().map(|s| s.turns.len()).sum(),
        n_determinations: samples.iter().map(StreamSample::n_bundles).sum(),
        seed,
        config_hash: config_hash.into(),
        corpus_file,
        corpus_sha256: hex(&Sha256::digest(body.as_bytes())),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a dataset directory, or a bare JSON-lines corpus file.
pub fn read_dataset(path: &Path) -> Result<(Option<DatasetManifest>, Vec<StreamSample>)> {
    if path.is_dir() {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(path.join("manifest.json"))?)?;
        let body = fs::read_to_string(path.join(&m.corpus_file))?;
        if hex(&Sha256::digest(body.as_bytes())) != m.corpus_sha256 {
            return Err(Error::Parse { line: 0, msg: "corpus does not match its manifest checksum".into() });
        }
        let samples = parse_jsonl(&body)?;
        Ok((Some(m), samples))
    } else {
        Ok((None, parse_jsonl(&fs::read_to_string(path)?)?))
    }
}
