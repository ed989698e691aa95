//! Run configuration: one TOML file plus dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub aggregation: AggregationConfig,
    pub dropping: DroppingConfig,
    pub slow_path: SlowPathConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            aggregation: AggregationConfig::default(),
            dropping: DroppingConfig::default(),
            slow_path: SlowPathConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub ln_eps: f64,
    /// Greedy decoding stops after this many tokens.
    pub max_response_len: usize,
    /// When set, respond requires `P(RESPOND | pair) > threshold` instead of
    /// a plain pair argmax.
    pub respond_threshold: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 64,
            ln_eps: 1e-5,
            max_response_len: 32,
            respond_threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Encoder output width; `None` means `model.d_model`.
    pub enc_dim: Option<usize>,
    pub side: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { enc_dim: None, side: 24 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationVariant {
    Concat,
    Addition,
    LearnableWeighting,
    AdaptiveRouting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGranularity {
    PerPosition,
    PerFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub variant: AggregationVariant,
    /// Tokens taken from the general and egocentric encoders, each 1 or 10.
    pub modes: [usize; 2],
    pub gate: GateGranularity,
    pub activation: GateActivation,
    /// Gate hidden width; `None` means `model.d_model`.
    pub d_hidden: Option<usize>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            variant: AggregationVariant::AdaptiveRouting,
            modes: [10, 10],
            gate: GateGranularity::PerPosition,
            activation: GateActivation::Sigmoid,
            d_hidden: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    All,
    Deep,
    Interleaved,
    InterleavedAndDeep,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    PerFrame,
    GlobalPercentile,
    /// Seeded uniform mask with the per-frame retained count.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroppingConfig {
    pub policy: Placement,
    pub beta: f64,
    pub scale_by_r: bool,
    pub selection: Selection,
}

impl Default for DroppingConfig {
    fn default() -> Self {
        Self { policy: Placement::Interleaved, beta: 0.5, scale_by_r: true, selection: Selection::PerFrame }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowPathConfig {
    pub enabled: bool,
    pub grid: bool,
    /// Single 6x6 pooling instead of the four 3x3 quadrant grids.
    pub fine_grained: bool,
    pub boxes: bool,
    /// Perturb oracle boxes by up to one patch.
    pub box_jitter: bool,
}

impl Default for SlowPathConfig {
    fn default() -> Self {
        Self { enabled: true, grid: true, fine_grained: false, boxes: true, box_jitter: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_episodes: usize,
    pub duration_s: f64,
    /// Expected events per second.
    pub event_rate: f64,
    /// Probability that a frame boundary carries a user query.
    pub query_rate: f64,
    /// Augmentations applied to a fraction of training episodes.
    pub augment: Vec<String>,
    pub augment_prob: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_episodes: 200,
            duration_s: 10.0,
            event_rate: 0.3,
            query_rate: 0.0,
            augment: Vec::new(),
            augment_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    /// Weight of the streaming term in the loss.
    pub streaming_weight: f64,
    /// Keep streaming supervision on silent frames that follow an
    /// unanswered user query.
    pub supervise_after_query: bool,
    /// Also supervise the position after a response with SILENCE.
    pub supervise_turn_end: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 1,
            lr: 2e-3,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            streaming_weight: 1.0,
            supervise_after_query: true,
            supervise_turn_end: false,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplScope {
    All,
    LmOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub include_corrupted: bool,
    pub ppl_scope: PplScope,
    /// Fixed TimeDiff charge for an unanswered turn; `None` charges the
    /// distance to the end of the stream.
    pub unmatched_penalty: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { include_corrupted: false, ppl_scope: PplScope::All, unmatched_penalty: None }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn enc_dim(&self) -> usize {
        self.encoder.enc_dim.unwrap_or(self.model.d_model)
    }

    pub fn gate_hidden(&self) -> usize {
        self.aggregation.d_hidden.unwrap_or(self.model.d_model)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            set_path(&mut root, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.d_model == 0 || m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) || !(m.d_model / m.n_heads).is_multiple_of(2) {
            return bad(format!("d_model {} must split into {} heads of even width", m.d_model, m.n_heads));
        }
        if m.n_layers == 0 || m.ffn_mult == 0 {
            return bad("n_layers and ffn_mult must be positive".into());
        }
        if m.vocab_size < crate::vocab::MIN_VOCAB {
            return bad(format!("vocab_size must be at least {}", crate::vocab::MIN_VOCAB));
        }
        if let Some(t) = m.respond_threshold {
            if !(0.0..1.0).contains(&t) {
                return bad(format!("respond_threshold {t} outside [0, 1)"));
            }
        }
        if self.encoder.side != 24 {
            return bad("encoder.side must be 24".into());
        }
        for &md in &self.aggregation.modes {
            if md != 1 && md != 10 {
                return bad(format!("aggregation mode {md} must be 1 or 10"));
            }
        }
        if !(0.0..1.0).contains(&self.dropping.beta) {
            return bad(format!("dropping.beta {} outside [0, 1)", self.dropping.beta));
        }
        if self.dropping.policy == Placement::Deep || self.dropping.policy == Placement::InterleavedAndDeep {
            crate::dropping::placement_layers(m.n_layers, self.dropping.policy)?;
        }
        let d = &self.dataset;
        if !(d.duration_s >= 1.0) {
            return bad("dataset.duration_s must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&d.event_rate) {
            return bad(format!("dataset.event_rate {} outside [0, 1] events per second", d.event_rate));
        }
        if !(0.0..=1.0).contains(&d.query_rate) || !(0.0..=1.0).contains(&d.augment_prob) {
            return bad("dataset rates must lie in [0, 1]".into());
        }
        for a in &d.augment {
            crate::dataset::AugmentStrategy::parse(a)?;
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.warmup_frac) || !(t.clip_norm > 0.0) {
            return bad("train.batch > 0, lr >= 0, warmup_frac in [0,1), clip_norm > 0 required".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert((*p).to_string(), value);
            return Ok(());
        }
        cur = table
            .entry((*p).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}
