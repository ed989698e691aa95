//! The assembled model: frozen encoders, aggregation router, and language
//! model, plus the teacher-forced view of a sample.

use std::collections::BTreeMap;

use crate::aggregation::Aggregator;
use crate::config::RunConfig;
use crate::dataset::StreamSample;
use crate::encoders::{align_streams, BoxSource, FrameBundle, SyntheticEncoders, SyntheticFrame};
use crate::error::{Error, Result};
use crate::loss::{streaming_lm_loss, supervised_rows, LossTerms};
use crate::model::{ForwardOutput, KvCache, ToyLM};
use crate::params::ParamStore;
use crate::rng::{mix_all, seeded, streams};
use crate::sequence::{build_plan, EpisodePlan, LayoutOptions, VisualRef};
use crate::slow_path::{make_box_tokens, make_fine_grained_tokens, make_grid_tokens, TemplateItem};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct FastSlowModel {
    cfg: RunConfig,
    pub store: ParamStore,
    encoders: SyntheticEncoders,
    aggregator: Aggregator,
    lm: ToyLM,
}

/// Grid, fine and box tokens of one keyframe, computed on first use.
type PooledTokens = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

/// A sample ready for teacher forcing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub plan: EpisodePlan,
    pub bundles: Vec<FrameBundle>,
}

impl FastSlowModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(cfg.seed, streams::PARAM_INIT);
        let d = cfg.model.d_model;
        let aggregator = Aggregator::new(&mut store, &cfg.aggregation, cfg.enc_dim(), d, cfg.gate_hidden(), &mut rng)?;
        let lm = ToyLM::new(&mut store, &cfg.model, &cfg.dropping, mix_all(&[cfg.seed, streams::RANDOM_DROP]), &mut rng)?;
        let encoders = SyntheticEncoders::new(cfg.seed, cfg.enc_dim());
        Ok(Self { cfg: cfg.clone(), store, encoders, aggregator, lm })
    }

    /// Rebuilds under `cfg` and carries over every parameter by name. Fails
    /// when the new configuration changes parameter names or shapes.
    pub fn reconfigured(&self, cfg: &RunConfig) -> Result<Self> {
        let mut out = Self::new(cfg)?;
        if out.store.len() != self.store.len() {
            return Err(Error::Config("configuration changes the parameter layout".into()));
        }
        let ids: Vec<_> = out.store.iter().map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec())).collect();
        for (id, name, shape) in ids {
            let src = self.store.find(&name).ok_or_else(|| Error::Config(format!("parameter {name} missing")))?;
            let t = self.store.get(src);
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("parameter {name} changes shape")));
            }
            *out.store.get_mut(id) = t.clone();
        }
        out.encoders = self.encoders.clone();
        Ok(out)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn lm(&self) -> &ToyLM {
        &self.lm
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn encoders(&self) -> &SyntheticEncoders {
        &self.encoders
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.aggregator.tokens_per_frame()
    }

    pub fn new_cache(&self) -> KvCache {
        self.lm.new_cache()
    }

    pub fn box_source(&self) -> BoxSource {
        if self.cfg.slow_path.box_jitter {
            BoxSource::Jittered { seed: mix_all(&[self.cfg.seed, streams::JITTER]) }
        } else {
            BoxSource::Oracle
        }
    }

    pub fn featurize(&self, frames: &[SyntheticFrame]) -> Result<Vec<FrameBundle>> {
        align_streams(&self.encoders, frames, self.cfg.aggregation.modes, self.box_source())
    }

    pub fn layout(&self) -> LayoutOptions {
        LayoutOptions {
            frame_tokens: self.tokens_per_frame(),
            slow_path: self.cfg.slow_path.enabled.then(|| self.cfg.slow_path.clone()),
            supervise_after_query: self.cfg.train.supervise_after_query,
            supervise_turn_end: self.cfg.train.supervise_turn_end,
        }
    }

    pub fn plan_for(&self, sample: &StreamSample) -> Result<EpisodePlan> {
        let (turns, queries) = sample.turn_specs();
        build_plan(sample.n_bundles(), &turns, &queries, &self.layout())
    }

    pub fn prepare(&self, sample: &StreamSample) -> Result<Prepared> {
        let bundles = self.featurize(&sample.frames()?)?;
        if bundles.len() != sample.n_bundles() {
            return Err(Error::Supervision(format!("{} bundles for a sample of {}", bundles.len(), sample.n_bundles())));
        }
        Ok(Prepared { id: sample.id.clone(), plan: self.plan_for(sample)?, bundles })
    }

    /// Model-width rows for `refs`, in order. Frame rows come from the
    /// aggregation router; template grid, fine and box rows are pooled in
    /// encoder width and pass through the general projection.
    pub fn visual_inputs(&self, tape: &mut Tape, pv: &[Var], refs: &[VisualRef], bundles: &[FrameBundle]) -> Result<Option<Var>> {
        if refs.is_empty() {
            return Ok(None);
        }
        let get = |b: usize| bundles.get(b).ok_or_else(|| Error::Index(format!("bundle {b} of {}", bundles.len())));
        let mut frame_slot: BTreeMap<usize, usize> = BTreeMap::new();
        for r in refs {
            let b = match *r {
                VisualRef::Frame { bundle, .. } => bundle,
                VisualRef::Template { bundle, item: TemplateItem::Frame(_) } => bundle,
                VisualRef::Template { .. } => continue,
            };
            frame_slot.insert(b, 0);
        }
        for (i, v) in frame_slot.values_mut().enumerate() {
            *v = i;
        }
        let t = self.tokens_per_frame();
        let agg = if frame_slot.is_empty() {
            None
        } else {
            let mut gen_rows = Vec::new();
            let mut ego_rows = Vec::new();
            for &b in frame_slot.keys() {
                let bundle = get(b)?;
                gen_rows.extend_from_slice(bundle.general.data());
                ego_rows.extend_from_slice(bundle.ego.data());
            }
            let e = self.encoders.enc_dim();
            let k = frame_slot.len();
            let g = tape.input(Tensor::new(vec![gen_rows.len() / e, e], gen_rows)?);
            let eg = tape.input(Tensor::new(vec![ego_rows.len() / e, e], ego_rows)?);
            Some(self.aggregator.forward(tape, pv, g, eg, k)?)
        };
        let n_agg = frame_slot.len() * t;

        let mut extra: Vec<f64> = Vec::new();
        let mut n_extra = 0;
        let mut pooled: BTreeMap<usize, PooledTokens> = BTreeMap::new();
        let mut order = Vec::with_capacity(refs.len());
        for r in refs {
            match *r {
                VisualRef::Frame { bundle, row } | VisualRef::Template { bundle, item: TemplateItem::Frame(row) } => {
                    if row >= t {
                        return Err(Error::Index(format!("frame token {row} of {t}")));
                    }
                    order.push(frame_slot[&bundle] * t + row);
                }
                VisualRef::Template { bundle, item } => {
                    let entry = pooled.entry(bundle).or_insert((None, None, None));
                    let b = get(bundle)?;
                    let row: Vec<f64> = match item {
                        TemplateItem::Grid { row, .. } => {
                            if entry.0.is_none() {
                                entry.0 = Some(make_grid_tokens(&b.patch_grid(&self.encoders)?)?.tokens);
                            }
                            entry.0.as_ref().expect("set").row(row).to_vec()
                        }
                        TemplateItem::Fine(i) => {
                            if entry.1.is_none() {
                                entry.1 = Some(make_fine_grained_tokens(&b.patch_grid(&self.encoders)?)?);
                            }
                            entry.1.as_ref().expect("set").row(i).to_vec()
                        }
                        TemplateItem::Box(i) => {
                            if entry.2.is_none() {
                                entry.2 = Some(make_box_tokens(&b.patch_grid(&self.encoders)?, &b.boxes)?.tokens);
                            }
                            entry.2.as_ref().expect("set").row(i).to_vec()
                        }
                        TemplateItem::Token(_) | TemplateItem::Frame(_) => unreachable!("handled above"),
                    };
                    extra.extend(row);
                    order.push(n_agg + n_extra);
                    n_extra += 1;
                }
            }
        }
        let projected = if n_extra == 0 {
            None
        } else {
            let e = self.encoders.enc_dim();
            let x = tape.input(Tensor::new(vec![n_extra, e], extra)?);
            Some(self.aggregator.project_general(tape, pv, x)?)
        };
        let stacked = match (agg, projected) {
            (Some(a), Some(p)) => tape.concat_rows(&[a, p])?,
            (Some(a), None) => a,
            (None, Some(p)) => p,
            (None, None) => unreachable!("refs is non-empty"),
        };
        if order.iter().enumerate().all(|(i, &o)| i == o) && order.len() == tape.value(stacked).rows() {
            return Ok(Some(stacked));
        }
        Ok(Some(tape.gather_rows(stacked, &order)?))
    }

    /// Teacher-forced forward over a whole plan.
    pub fn forward_plan(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        plan: &EpisodePlan,
        bundles: &[FrameBundle],
        cache: Option<&mut KvCache>,
        logit_rows: Option<&[usize]>,
    ) -> Result<ForwardOutput> {
        let visual = self.visual_inputs(tape, pv, &plan.visual, bundles)?;
        self.lm.forward(tape, pv, &plan.slots, visual, cache, logit_rows)
    }

    /// Loss of one prepared sample, with logits only at supervised rows.
    pub fn sequence_loss(&self, tape: &mut Tape, pv: &[Var], p: &Prepared) -> Result<(LossTerms, Var, Vec<usize>)> {
        let rows = supervised_rows(&p.plan.supervision);
        if rows.is_empty() {
            return Err(Error::Supervision(format!("sample {} has no supervised positions", p.id)));
        }
        let out = self.forward_plan(tape, pv, &p.plan, &p.bundles, None, Some(&rows))?;
        let terms = streaming_lm_loss(tape, out.logits, &rows, &p.plan.supervision, p.plan.len(), self.cfg.train.streaming_weight)?;
        Ok((terms, out.logits, rows))
    }

    /// Inference-only logits at `rows` of a prepared sample.
    pub fn logits_at(&self, p: &Prepared, rows: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let pv = self.store.bind(&mut tape);
        let out = self.forward_plan(&mut tape, &pv, &p.plan, &p.bundles, None, Some(rows))?;
        Ok(tape.value(out.logits).clone())
    }
}
