//! Toy decoder-only language model over interleaved visual and text rows,
//! with per-layer token dropping and an incremental key/value cache.

use serde::{Deserialize, Serialize};

use crate::config::{DroppingConfig, ModelConfig};
use crate::dropping::{placement_layers, select_for_layer, LayerRoutingRecord};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::sequence::Slot;
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{self, TokenId};

#[derive(Clone, Debug)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    /// Dropping projection `[d x 1]`; present on every layer so that
    /// placement sweeps share one checkpoint layout.
    router: ParamId,
}

#[derive(Clone, Debug)]
pub struct ToyLM {
    cfg: ModelConfig,
    dropping: DroppingConfig,
    routed: Vec<bool>,
    drop_seed: u64,
    tok_emb: ParamId,
    layers: Vec<LayerParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
    pos: Vec<usize>,
}

/// Keys and values of every row that took part in attention at each layer.
/// Rows dropped at a layer are absent from that layer's cache.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    width: usize,
    len: usize,
    last: Option<Slot>,
    last_group: Option<u32>,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self { layers: vec![LayerCache::default(); n_layers], width, len: 0, last: None, last_group: None }
    }

    /// Positions seen so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached rows at `layer`.
    pub fn layer_rows(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, |l| l.pos.len())
    }

    /// Rejects chunks that reuse a finished visual group or otherwise do
    /// not continue the cached episode.
    fn check_continuation(&self, slots: &[Slot]) -> Result<()> {
        let mut last = self.last;
        let mut last_group = self.last_group;
        for (i, s) in slots.iter().enumerate() {
            if let Slot::Visual { group, size } = *s {
                let continues = matches!(last, Some(Slot::Visual { group: g, size: z }) if g == group && z == size);
                if !continues && last_group.is_some_and(|g| group <= g) {
                    return Err(Error::Cache(format!(
                        "visual group {group} at new position {i} does not follow cached group {}",
                        last_group.unwrap_or_default()
                    )));
                }
                last_group = Some(group);
            }
            last = Some(*s);
        }
        Ok(())
    }
}

pub struct ForwardOutput {
    /// `[rows x vocab]`, one row per requested position.
    pub logits: Var,
    /// Routing decision of each routed layer, over the new positions.
    pub records: Vec<LayerRoutingRecord>,
    /// Residual stream entering each layer, plus the final one: `n_layers + 1`
    /// entries over the new positions.
    pub hidden: Vec<Var>,
}

/// Silence-or-respond decision read at a frame-final position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Determination {
    pub respond: bool,
    /// `logit(RESPOND) - logit(SILENCE)`.
    pub logit_gap: f64,
}

/// Pair argmax with ties going to silence. With a threshold, respond also
/// needs the pairwise RESPOND probability to exceed it.
pub fn determine(logits: &[f64], threshold: Option<f64>) -> Determination {
    let gap = logits[vocab::RESPOND as usize] - logits[vocab::SILENCE as usize];
    let respond = match threshold {
        None => gap > 0.0,
        Some(th) => gap > 0.0 && 1.0 / (1.0 + (-gap).exp()) > th,
    };
    Determination { respond, logit_gap: gap }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub truncated: bool,
}

impl ToyLM {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        dropping: &DroppingConfig,
        drop_seed: u64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        if cfg.n_heads == 0 || !d.is_multiple_of(cfg.n_heads) || !(d / cfg.n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {d} must split into {} even-width heads", cfg.n_heads)));
        }
        let routed_layers = placement_layers(cfg.n_layers, dropping.policy)?;
        let routed = (0..cfg.n_layers).map(|l| routed_layers.contains(&l)).collect();
        let f = cfg.ffn_mult * d;
        let tok_emb = store.add_weight("lm.tok_emb", cfg.vocab_size, d, rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("lm.layer{l}.{s}");
            layers.push(LayerParams {
                ln1_g: store.add_filled(&n("ln1.g"), &[d], 1.0),
                ln1_b: store.add_zeros(&n("ln1.b"), &[d]),
                wq: store.add_weight(&n("attn.wq"), d, d, rng),
                bq: store.add_zeros(&n("attn.bq"), &[d]),
                wk: store.add_weight(&n("attn.wk"), d, d, rng),
                bk: store.add_zeros(&n("attn.bk"), &[d]),
                wv: store.add_weight(&n("attn.wv"), d, d, rng),
                bv: store.add_zeros(&n("attn.bv"), &[d]),
                wo: store.add_weight(&n("attn.wo"), d, d, rng),
                bo: store.add_zeros(&n("attn.bo"), &[d]),
                ln2_g: store.add_filled(&n("ln2.g"), &[d], 1.0),
                ln2_b: store.add_zeros(&n("ln2.b"), &[d]),
                w1: store.add_weight(&n("ffn.w1"), d, f, rng),
                b1: store.add_zeros(&n("ffn.b1"), &[f]),
                w2: store.add_weight(&n("ffn.w2"), f, d, rng),
                b2: store.add_zeros(&n("ffn.b2"), &[d]),
                router: store.add_weight(&n("router.w_theta"), d, 1, rng),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            dropping: dropping.clone(),
            routed,
            drop_seed,
            tok_emb,
            layers,
            lnf_g: store.add_filled("lm.ln_f.g", &[d], 1.0),
            lnf_b: store.add_zeros("lm.ln_f.b", &[d]),
            head_w: store.add_weight("lm.head.w", d, cfg.vocab_size, rng),
            head_b: store.add_zeros("lm.head.b", &[cfg.vocab_size]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dropping(&self) -> &DroppingConfig {
        &self.dropping
    }

    /// Same weights, different dropping setup. Placement is re-derived.
    pub fn with_dropping(&self, dropping: &DroppingConfig) -> Result<Self> {
        let routed_layers = placement_layers(self.cfg.n_layers, dropping.policy)?;
        let mut out = self.clone();
        out.routed = (0..self.cfg.n_layers).map(|l| routed_layers.contains(&l)).collect();
        out.dropping = dropping.clone();
        Ok(out)
    }

    pub fn routed_layers(&self) -> Vec<usize> {
        (0..self.routed.len()).filter(|&l| self.routed[l]).collect()
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.n_layers, self.cfg.d_model)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Block output parameters of every layer: attention out and FFN out.
    pub fn residual_writers(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.wo, l.bo, l.w2, l.b2]).collect()
    }

    /// Runs the new positions `slots`. `visual` holds one row per visual
    /// slot, in order. With a cache, the positions continue the cached
    /// episode and the cache is extended. `logit_rows` selects which of the
    /// new positions get logits; `None` means all of them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        slots: &[Slot],
        visual: Option<Var>,
        mut cache: Option<&mut KvCache>,
        logit_rows: Option<&[usize]>,
    ) -> Result<ForwardOutput> {
        let d = self.cfg.d_model;
        let n = slots.len();
        let n_visual = slots.iter().filter(|s| s.is_visual()).count();
        let got_visual = visual.map_or(0, |v| tape.value(v).rows());
        if got_visual != n_visual {
            return Err(Error::Shape(format!("{got_visual} visual rows for {n_visual} visual slots")));
        }
        if let Some(v) = visual {
            if tape.value(v).cols() != d {
                return Err(Error::Shape(format!("visual rows have width {}, model width {d}", tape.value(v).cols())));
            }
        }
        let offset = match cache.as_deref() {
            Some(c) => {
                if c.layers.len() != self.layers.len() || c.width != d {
                    return Err(Error::Cache("cache was built for a different model".into()));
                }
                c.check_continuation(slots)?;
                c.len
            }
            None => 0,
        };
        if n == 0 {
            let empty = tape.input(Tensor::zeros(&[0, self.cfg.vocab_size]));
            return Ok(ForwardOutput { logits: empty, records: Vec::new(), hidden: Vec::new() });
        }
        let rows: Vec<usize> = match logit_rows {
            Some(r) => {
                if let Some(&bad) = r.iter().find(|&&i| i >= n) {
                    return Err(Error::Index(format!("logit row {bad} of {n} new positions")));
                }
                r.to_vec()
            }
            None => (0..n).collect(),
        };

        let mut x = self.embed(tape, pv, slots, visual)?;
        let positions: Vec<usize> = (offset..offset + n).collect();
        let mut records = Vec::new();
        let mut hidden = vec![x];
        for (l, lp) in self.layers.iter().enumerate() {
            let (participating, scale) = if self.routed[l] {
                let r = tape.matmul(x, pv[lp.router.0])?;
                let weights: Vec<f64> = tape
                    .value(r)
                    .data()
                    .iter()
                    .zip(slots)
                    .map(|(&w, s)| if s.is_visual() { w } else { f64::INFINITY })
                    .collect();
                let rec = select_for_layer(slots, &weights, &self.dropping, l, self.drop_seed)?;
                let part = rec.participating();
                records.push(rec);
                let scale = if self.dropping.scale_by_r && !part.is_empty() {
                    let s = tape.gather_rows(r, &part)?;
                    let text: Vec<usize> = (0..part.len()).filter(|&j| !slots[part[j]].is_visual()).collect();
                    Some(if text.is_empty() {
                        s
                    } else {
                        let ones = tape.input(Tensor::filled(&[text.len(), 1], 1.0));
                        tape.merge_rows(s, ones, &text)?
                    })
                } else {
                    None
                };
                (part, scale)
            } else {
                ((0..n).collect::<Vec<_>>(), None)
            };
            let pos: Vec<usize> = participating.iter().map(|&i| positions[i]).collect();
            let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[l]);
            x = crate::dropping::apply_routed_layer(tape, x, &participating, scale, |tape, xs| {
                self.block(tape, pv, lp, xs, &pos, layer_cache)
            })?;
            hidden.push(x);
        }
        if let Some(c) = cache {
            c.len += n;
            for s in slots {
                if let Slot::Visual { group, .. } = s {
                    c.last_group = Some(*group);
                }
            }
            c.last = slots.last().copied();
        }

        let xr = if rows.len() == n && rows.iter().enumerate().all(|(i, &r)| i == r) {
            x
        } else {
            tape.gather_rows(x, &rows)?
        };
        let h = tape.layer_norm(xr, pv[self.lnf_g.0], pv[self.lnf_b.0], self.cfg.ln_eps)?;
        let logits = tape.linear(h, pv[self.head_w.0], pv[self.head_b.0])?;
        Ok(ForwardOutput { logits, records, hidden })
    }

    fn embed(&self, tape: &mut Tape, pv: &[Var], slots: &[Slot], visual: Option<Var>) -> Result<Var> {
        let mut ids = Vec::new();
        for s in slots {
            if let Slot::Token(t) = *s {
                if t as usize >= self.cfg.vocab_size {
                    return Err(Error::Index(format!("token {t} outside vocabulary of {}", self.cfg.vocab_size)));
                }
                ids.push(t as usize);
            }
        }
        let text = if ids.is_empty() { None } else { Some(tape.gather_rows(pv[self.tok_emb.0], &ids)?) };
        let stacked = match (visual, text) {
            (Some(v), Some(t)) => tape.concat_rows(&[v, t])?,
            (Some(v), None) => return Ok(v),
            (None, Some(t)) => return Ok(t),
            (None, None) => return Err(Error::Shape("nothing to embed".into())),
        };
        let n_visual = slots.len() - ids.len();
        let (mut vi, mut ti) = (0, n_visual);
        let order: Vec<usize> = slots
            .iter()
            .map(|s| {
                if s.is_visual() {
                    vi += 1;
                    vi - 1
                } else {
                    ti += 1;
                    ti - 1
                }
            })
            .collect();
        tape.gather_rows(stacked, &order)
    }

    /// Pre-norm attention and feed-forward on the participating rows.
    /// Returns `(xs + a, a, m)`.
    fn block(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        lp: &LayerParams,
        xs: Var,
        pos: &[usize],
        cache: Option<&mut LayerCache>,
    ) -> Result<(Var, Var, Var)> {
        let eps = self.cfg.ln_eps;
        let heads = self.cfg.n_heads;
        let h = tape.layer_norm(xs, pv[lp.ln1_g.0], pv[lp.ln1_b.0], eps)?;
        let q = tape.linear(h, pv[lp.wq.0], pv[lp.bq.0])?;
        let k = tape.linear(h, pv[lp.wk.0], pv[lp.bk.0])?;
        let v = tape.linear(h, pv[lp.wv.0], pv[lp.bv.0])?;
        let q = tape.rotary(q, pos, heads)?;
        let k = tape.rotary(k, pos, heads)?;
        let att = match cache {
            Some(c) if !c.pos.is_empty() => {
                let d = self.cfg.d_model;
                let kc = tape.input(Tensor::new(vec![c.pos.len(), d], c.k.clone())?);
                let vc = tape.input(Tensor::new(vec![c.pos.len(), d], c.v.clone())?);
                let k_all = tape.concat_rows(&[kc, k])?;
                let v_all = tape.concat_rows(&[vc, v])?;
                let k_pos: Vec<usize> = c.pos.iter().chain(pos).copied().collect();
                let att = tape.attention(q, k_all, v_all, pos, &k_pos, heads)?;
                c.k.extend_from_slice(tape.value(k).data());
                c.v.extend_from_slice(tape.value(v).data());
                c.pos.extend_from_slice(pos);
                att
            }
            Some(c) => {
                let att = tape.attention(q, k, v, pos, pos, heads)?;
                c.k.extend_from_slice(tape.value(k).data());
                c.v.extend_from_slice(tape.value(v).data());
                c.pos.extend_from_slice(pos);
                att
            }
            None => tape.attention(q, k, v, pos, pos, heads)?,
        };
        let a = tape.linear(att, pv[lp.wo.0], pv[lp.bo.0])?;
        let x1 = tape.add(xs, a)?;
        let h2 = tape.layer_norm(x1, pv[lp.ln2_g.0], pv[lp.ln2_b.0], eps)?;
        let f = tape.linear(h2, pv[lp.w1.0], pv[lp.b1.0])?;
        let f = tape.gelu(f)?;
        let m = tape.linear(f, pv[lp.w2.0], pv[lp.b2.0])?;
        Ok((x1, a, m))
    }

    /// Inference-only step over new positions: binds `store`, extends the
    /// cache, and returns logits for every new position.
    pub fn extend(
        &self,
        store: &ParamStore,
        cache: &mut KvCache,
        slots: &[Slot],
        visual: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<LayerRoutingRecord>)> {
        let mut tape = Tape::inference();
        let pv = store.bind(&mut tape);
        let vis = visual.map(|v| tape.input(v.clone()));
        let out = self.forward(&mut tape, &pv, slots, vis, Some(cache), None)?;
        Ok((tape.value(out.logits).clone(), out.records))
    }

    /// Greedy decoding from the logits at the trigger position. Each emitted
    /// token is fed back; `TURN_END` is always appended to the cache, also
    /// after truncation.
    pub fn generate_response(
        &self,
        store: &ParamStore,
        cache: &mut KvCache,
        trigger_logits: &[f64],
        max_len: usize,
    ) -> Result<Generation> {
        let mut tokens = Vec::new();
        let mut next = argmax(trigger_logits) as TokenId;
        let truncated = loop {
            if next == vocab::TURN_END {
                break false;
            }
            if tokens.len() == max_len {
                break true;
            }
            tokens.push(next);
            let (logits, _) = self.extend(store, cache, &[Slot::Token(next)], None)?;
            next = argmax(logits.row(0)) as TokenId;
        };
        self.extend(store, cache, &[Slot::Token(vocab::TURN_END)], None)?;
        Ok(Generation { tokens, truncated })
    }
}
