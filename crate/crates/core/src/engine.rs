//! The online loop. Frames arrive one tick at a time; every complete group
//! of four becomes a bundle, gets a silence-or-respond determination, and on
//! respond the keyframe template and a greedy response follow.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::StreamSample;
use crate::encoders::scene::{FRAME_DT, GROUP};
use crate::encoders::{make_bundle, FrameBundle, SyntheticFrame};
use crate::error::{Error, Result};
use crate::model::{argmax, determine, Determination, KvCache};
use crate::params::hex;
use crate::sequence::EpisodePlan;
use crate::system::FastSlowModel;
use crate::tensor::Tape;
use crate::vocab::{self, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Silent,
    Respond,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyMs {
    pub encode: f64,
    pub fast: f64,
    pub slow: f64,
    pub generate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogEntry {
    Header {
        config_hash: String,
        seed: u64,
        tokens_per_frame: usize,
        slow_path: bool,
    },
    Query {
        t: f64,
        tokens: Vec<TokenId>,
    },
    Determination {
        t: f64,
        bundle: usize,
        decision: Decision,
        logit_gap: f64,
        latency_ms: LatencyMs,
    },
    Response {
        t: f64,
        tokens: Vec<TokenId>,
        truncated: bool,
    },
    Footer {
        n_determinations: usize,
        determinism_hash: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeLog {
    pub entries: Vec<LogEntry>,
}

impl EpisodeLog {
    /// SHA-256 over every entry except the footer, with latencies zeroed.
    pub fn determinism_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            let e = match e {
                LogEntry::Footer { .. } => continue,
                LogEntry::Determination { t, bundle, decision, logit_gap, .. } => LogEntry::Determination {
                    t: *t,
                    bundle: *bundle,
                    decision: *decision,
                    logit_gap: *logit_gap,
                    latency_ms: LatencyMs::default(),
                },
                other => other.clone(),
            };
            h.update(serde_json::to_vec(&e).expect("log entries serialize"));
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn determinations(&self) -> impl Iterator<Item = (f64, Decision, f64)> + '_ {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Determination { t, decision, logit_gap, .. } => Some((*t, *decision, *logit_gap)),
            _ => None,
        })
    }

    pub fn responses(&self) -> impl Iterator<Item = (f64, &[TokenId], bool)> + '_ {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Response { t, tokens, truncated } => Some((*t, tokens.as_slice(), *truncated)),
            _ => None,
        })
    }

    pub fn response_times(&self) -> Vec<f64> {
        self.responses().map(|(t, _, _)| t).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a log and checks the footer hash when one is present.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: LogEntry = serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            entries.push(e);
        }
        let log = Self { entries };
        if let Some(LogEntry::Footer { determinism_hash, .. }) = log.entries.last() {
            if *determinism_hash != log.determinism_hash() {
                return Err(Error::Parse {
                    line: text.lines().count(),
                    msg: "footer determinism_hash does not match the log".into(),
                });
            }
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineOptions {
    pub slow_path: bool,
    /// Keep the logits of every determination for later comparison.
    pub record_logits: bool,
    pub record_latency: bool,
}

impl EngineOptions {
    pub fn for_model(model: &FastSlowModel) -> Self {
        Self { slow_path: model.config().slow_path.enabled, record_logits: false, record_latency: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Silent,
    Respond { tokens: Vec<TokenId>, truncated: bool },
}

pub struct EpisodeState<'m> {
    model: &'m FastSlowModel,
    opts: EngineOptions,
    cache: KvCache,
    plan: EpisodePlan,
    fed: usize,
    fed_visual: usize,
    buffer: Vec<SyntheticFrame>,
    last_t: Option<f64>,
    bundles: Vec<FrameBundle>,
    queries: VecDeque<(f64, Vec<TokenId>)>,
    log: EpisodeLog,
    determination_logits: Vec<Vec<f64>>,
}

fn ms(start: Instant, on: bool) -> f64 {
    if on {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

impl<'m> EpisodeState<'m> {
    pub fn new(model: &'m FastSlowModel, opts: EngineOptions) -> Self {
        let header = LogEntry::Header {
            config_hash: model.config().hash(),
            seed: model.config().seed,
            tokens_per_frame: model.tokens_per_frame(),
            slow_path: opts.slow_path,
        };
        Self {
            model,
            opts,
            cache: model.new_cache(),
            plan: EpisodePlan::default(),
            fed: 0,
            fed_visual: 0,
            buffer: Vec::with_capacity(GROUP),
            last_t: None,
            bundles: Vec::new(),
            queries: VecDeque::new(),
            log: EpisodeLog { entries: vec![header] },
            determination_logits: Vec::new(),
        }
    }

    /// Time of the newest ingested frame.
    pub fn current_time(&self) -> f64 {
        self.last_t.unwrap_or(0.0)
    }

    pub fn plan(&self) -> &EpisodePlan {
        &self.plan
    }

    pub fn bundles(&self) -> &[FrameBundle] {
        &self.bundles
    }

    pub fn determination_logits(&self) -> &[Vec<f64>] {
        &self.determination_logits
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Queues a query. It enters the sequence, after `USER_TAG`, before the
    /// first bundle whose window starts at or after `time`.
    pub fn inject_user_query(&mut self, tokens: &[TokenId], time: f64) -> Result<()> {
        if time < self.current_time() - 1e-9 {
            return Err(Error::Stream(format!("query at {time} s is before the current time {} s", self.current_time())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.model.config().model.vocab_size) {
            return Err(Error::Index(format!("query token {bad} outside the vocabulary")));
        }
        self.queries.push_back((time, tokens.to_vec()));
        Ok(())
    }

    pub fn ingest_frame(&mut self, frame: SyntheticFrame) -> Result<Option<StepOutcome>> {
        if let Some(prev) = self.last_t {
            if (frame.t - (prev + FRAME_DT)).abs() > 1e-6 {
                return Err(Error::Stream(format!("frame at {} s does not follow {prev} s at 8 FPS", frame.t)));
            }
        }
        self.last_t = Some(frame.t);
        self.buffer.push(frame);
        if self.buffer.len() < GROUP {
            return Ok(None);
        }
        let start = Instant::now();
        let group: Vec<&SyntheticFrame> = self.buffer.iter().collect();
        let cfg = self.model.config();
        let bundle = make_bundle(
            self.model.encoders(),
            self.bundles.len(),
            group[0].t,
            &group,
            cfg.aggregation.modes,
            self.model.box_source(),
        )?;
        self.buffer.clear();
        let encode = ms(start, self.opts.record_latency);
        self.step(bundle, encode).map(Some)
    }

    /// Feeds all plan positions not yet in the cache and returns the logits
    /// of the last one.
    fn feed(&mut self) -> Result<Vec<f64>> {
        let slots = &self.plan.slots[self.fed..];
        let refs = &self.plan.visual[self.fed_visual..];
        let mut tape = Tape::inference();
        let pv = self.model.store.bind(&mut tape);
        let visual = self.model.visual_inputs(&mut tape, &pv, refs, &self.bundles)?;
        let last = slots.len() - 1;
        let out = self.model.lm().forward(&mut tape, &pv, slots, visual, Some(&mut self.cache), Some(&[last]))?;
        self.fed = self.plan.slots.len();
        self.fed_visual = self.plan.visual.len();
        Ok(tape.value(out.logits).row(0).to_vec())
    }

    pub fn step(&mut self, bundle: FrameBundle, encode_ms: f64) -> Result<StepOutcome> {
        if bundle.index != self.bundles.len() {
            return Err(Error::Stream(format!("bundle {} arrived, expected {}", bundle.index, self.bundles.len())));
        }
        let t = bundle.timestamp;
        let b = bundle.index;
        self.bundles.push(bundle);
        let mut i = 0;
        while i < self.queries.len() {
            if self.queries[i].0 <= t + 1e-9 {
                let (qt, tokens) = self.queries.remove(i).expect("in range");
                self.plan.user_query(&tokens);
                self.log.entries.push(LogEntry::Query { t: qt, tokens });
            } else {
                i += 1;
            }
        }
        let frame_tokens = self.model.tokens_per_frame();
        let on = self.opts.record_latency;
        let mut latency = LatencyMs { encode: encode_ms, ..LatencyMs::default() };

        let start = Instant::now();
        self.plan.push_frame(b, frame_tokens);
        let logits = self.feed()?;
        let Determination { respond, logit_gap } = determine(&logits, self.model.config().model.respond_threshold);
        latency.fast = ms(start, on);
        if self.opts.record_logits {
            self.determination_logits.push(logits);
        }
        if !respond {
            self.plan.push_token(vocab::FRAME_SEP);
            self.log.entries.push(LogEntry::Determination { t, bundle: b, decision: Decision::Silent, logit_gap, latency_ms: latency });
            return Ok(StepOutcome::Silent);
        }

        let start = Instant::now();
        if self.opts.slow_path {
            let cfg = self.model.config().slow_path.clone();
            self.plan.push_template(b, frame_tokens, &cfg);
        } else {
            self.plan.push_token(vocab::RESPOND);
        }
        let trigger = self.feed()?;
        latency.slow = ms(start, on);

        let start = Instant::now();
        let max_len = self.model.config().model.max_response_len;
        let g = self.model.lm().generate_response(&self.model.store, &mut self.cache, &trigger, max_len)?;
        self.plan.push_tokens(&g.tokens);
        self.plan.push_token(vocab::TURN_END);
        self.fed = self.plan.len();
        latency.generate = ms(start, on);

        self.log.entries.push(LogEntry::Determination { t, bundle: b, decision: Decision::Respond, logit_gap, latency_ms: latency });
        self.log.entries.push(LogEntry::Response { t, tokens: g.tokens.clone(), truncated: g.truncated });
        Ok(StepOutcome::Respond { tokens: g.tokens, truncated: g.truncated })
    }

    /// Closes the episode. A trailing partial group is discarded.
    pub fn finish(mut self) -> (EpisodeLog, Vec<Vec<f64>>) {
        let n = self.bundles.len();
        let hash = self.log.determinism_hash();
        self.log.entries.push(LogEntry::Footer { n_determinations: n, determinism_hash: hash });
        (self.log, self.determination_logits)
    }
}

/// Streams a sample through the engine, with its queries injected up front.
pub fn run_sample(model: &FastSlowModel, sample: &StreamSample, opts: EngineOptions) -> Result<(EpisodeLog, Vec<Vec<f64>>)> {
    let frames = sample.frames()?;
    run_frames(model, &frames, &sample_queries(sample), opts)
}

pub fn sample_queries(sample: &StreamSample) -> Vec<(f64, Vec<TokenId>)> {
    sample.turns.iter().filter_map(|t| t.query_time.map(|q| (q, t.query.clone()))).collect()
}

pub fn run_frames(
    model: &FastSlowModel,
    frames: &[SyntheticFrame],
    queries: &[(f64, Vec<TokenId>)],
    opts: EngineOptions,
) -> Result<(EpisodeLog, Vec<Vec<f64>>)> {
    let mut state = EpisodeState::new(model, opts);
    for (t, q) in queries {
        state.inject_user_query(q, *t)?;
    }
    for f in frames {
        state.ingest_frame(f.clone())?;
    }
    Ok(state.finish())
}

/// What one teacher-forced pass over a logged episode predicts.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub determination_logits: Vec<Vec<f64>>,
    pub decisions: Vec<Decision>,
    /// Greedy continuation at each logged response, read along the logged
    /// tokens; matches the log when the online run was consistent.
    pub responses: Vec<Vec<TokenId>>,
}

/// Rebuilds the episode sequence from `log` and runs it in one forward pass.
pub fn replay(model: &FastSlowModel, bundles: &[FrameBundle], log: &EpisodeLog) -> Result<Replay> {
    let slow_path = match log.entries.first() {
        Some(LogEntry::Header { slow_path, tokens_per_frame, .. }) => {
            if *tokens_per_frame != model.tokens_per_frame() {
                return Err(Error::Stream("log was written with a different frame token count".into()));
            }
            *slow_path
        }
        _ => return Err(Error::Parse { line: 1, msg: "episode log has no header".into() }),
    };
    let mut plan = EpisodePlan::default();
    let frame_tokens = model.tokens_per_frame();
    let mut det_pos = Vec::new();
    let mut triggers = Vec::new();
    let mut entries = log.entries.iter().peekable();
    while let Some(e) = entries.next() {
        match e {
            LogEntry::Query { tokens, .. } => plan.user_query(tokens),
            LogEntry::Determination { bundle, decision, .. } => {
                det_pos.push(plan.push_frame(*bundle, frame_tokens));
                match decision {
                    Decision::Silent => {
                        plan.push_token(vocab::FRAME_SEP);
                    }
                    Decision::Respond => {
                        let Some(LogEntry::Response { tokens, .. }) = entries.next() else {
                            return Err(Error::Parse { line: 0, msg: "respond determination without a response".into() });
                        };
                        let trigger = if slow_path {
                            plan.push_template(*bundle, frame_tokens, &model.config().slow_path)
                        } else {
                            plan.push_token(vocab::RESPOND)
                        };
                        plan.push_response(trigger, tokens, false);
                        triggers.push((trigger, tokens.len()));
                    }
                }
            }
            _ => {}
        }
    }
    let mut tape = Tape::inference();
    let pv = model.store.bind(&mut tape);
    let out = model.forward_plan(&mut tape, &pv, &plan, bundles, None, None)?;
    let logits = tape.value(out.logits);
    let threshold = model.config().model.respond_threshold;
    let determination_logits: Vec<Vec<f64>> = det_pos.iter().map(|&p| logits.row(p).to_vec()).collect();
    let decisions = determination_logits
        .iter()
        .map(|l| if determine(l, threshold).respond { Decision::Respond } else { Decision::Silent })
        .collect();
    let responses = triggers
        .iter()
        .map(|&(trigger, n)| {
            let mut out = Vec::new();
            for i in 0..n {
                let tok = argmax(logits.row(trigger + i)) as TokenId;
                if tok == vocab::TURN_END {
                    break;
                }
                out.push(tok);
            }
            out
        })
        .collect();
    Ok(Replay { determination_logits, decisions, responses })
}
