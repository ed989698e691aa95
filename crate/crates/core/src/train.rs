//! Training loop: AdamW with warmup and cosine decay, global-norm clipping,
//! per-sample gradient accumulation, and resumable checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_dialogue, AugmentStrategy, StreamSample};
use crate::error::{Error, Result};
use crate::rng::{mix_all, seeded, streams};
use crate::system::{FastSlowModel, Prepared};
use crate::tensor::{Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub streaming_term: f64,
    pub lm_term: f64,
    pub grad_norm: f64,
}

/// First line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub config_hash: String,
    pub seed: u64,
    pub n_params: usize,
    pub n_samples: usize,
    pub steps: usize,
    pub start_step: u64,
}

/// Learning rate for zero-based `step` out of `total`.
pub fn learning_rate(base: f64, step: u64, total: usize, warmup_frac: f64) -> f64 {
    let total = total.max(1) as f64;
    let warmup = (warmup_frac * total).ceil();
    let s = step as f64;
    if s < warmup {
        return base * (s + 1.0) / warmup;
    }
    let span = (total - warmup).max(1.0);
    let progress = ((s - warmup) / span).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_model(model: &FastSlowModel) -> Self {
        let zeros: Vec<Tensor> = model.store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros }
    }
}

pub struct Trainer {
    samples: Vec<StreamSample>,
    prepared: Vec<Prepared>,
    strategies: Vec<AugmentStrategy>,
    opt: AdamState,
    step: u64,
    dump_dir: PathBuf,
}

fn norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

impl Trainer {
    pub fn new(model: &FastSlowModel, samples: Vec<StreamSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyStream("training set has no episodes".into()));
        }
        let prepared = samples.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
        let strategies = model
            .config()
            .dataset
            .augment
            .iter()
            .map(|a| AugmentStrategy::parse(a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            prepared,
            strategies,
            opt: AdamState::for_model(model),
            step: 0,
            dump_dir: std::env::temp_dir(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(model: &mut FastSlowModel, samples: Vec<StreamSample>, manifest: &Path) -> Result<Self> {
        let (m, extra) = model.store.load_into(manifest)?;
        let mut t = Self::new(model, samples)?;
        for (name, tensor) in extra {
            let (slot, key) = if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut t.opt.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut t.opt.v, k)
            } else {
                continue;
            };
            let id = model
                .store
                .find(key)
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("optimizer state for unknown parameter {key}") })?;
            if tensor.shape() != model.store.get(id).shape() {
                return Err(Error::Shape(format!("optimizer state for {key} has the wrong shape")));
            }
            slot[id.0] = tensor;
        }
        t.step = m.step;
        Ok(t)
    }

    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = dir.into();
        self
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    /// Sample indices used by `step`. Each epoch is a fresh permutation
    /// seeded by (seed, epoch), so the order does not depend on history.
    pub fn batch_indices(&self, seed: u64, batch: usize, step: u64) -> Vec<usize> {
        let n = self.samples.len();
        (0..batch)
            .map(|j| {
                let g = step as usize * batch + j;
                let epoch = (g / n) as u64;
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut seeded(mix_all(&[seed, epoch]), streams::SHUFFLE));
                order[g % n]
            })
            .collect()
    }

    fn sample_for(&self, model: &FastSlowModel, idx: usize, step: u64, j: usize) -> Result<Option<Prepared>> {
        let cfg = model.config();
        if self.strategies.is_empty() || cfg.dataset.augment_prob <= 0.0 {
            return Ok(None);
        }
        let mut rng = seeded(mix_all(&[cfg.seed, step, j as u64]), streams::AUGMENT);
        if rng.random::<f64>() >= cfg.dataset.augment_prob {
            return Ok(None);
        }
        let strategy = self.strategies[rng.random_range(0..self.strategies.len())];
        let s = augment_dialogue(&self.samples[idx], strategy, rng.random(), cfg.model.vocab_size)?;
        if s.turns.is_empty() && s.n_bundles() == 0 {
            return Ok(None);
        }
        model.prepare(&s).map(Some)
    }

    /// One optimizer update over `train.batch` samples.
    pub fn step(&mut self, model: &mut FastSlowModel) -> Result<StepRecord> {
        let cfg = model.config().clone();
        let tc = &cfg.train;
        let indices = self.batch_indices(cfg.seed, tc.batch, self.step);
        let mut grads: Vec<Vec<f64>> = model.store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let (mut loss, mut stream, mut lm) = (0.0, 0.0, 0.0);
        let scale = 1.0 / indices.len() as f64;
        for (j, &idx) in indices.iter().enumerate() {
            let augmented = self.sample_for(model, idx, self.step, j)?;
            let p = augmented.as_ref().unwrap_or(&self.prepared[idx]);
            let mut tape = Tape::new();
            let pv = model.store.bind(&mut tape);
            let (terms, _, _) = model.sequence_loss(&mut tape, &pv, p)?;
            let l = tape.value(terms.total).item()?;
            if !l.is_finite() {
                return Err(self.dump(model, &indices, l, "loss"));
            }
            loss += l * scale;
            stream += tape.value(terms.streaming).item()? * scale;
            lm += tape.value(terms.lm).item()? * scale;
            let g = tape.backward(terms.total)?;
            for (slot, gs) in g.params() {
                for (acc, x) in grads[slot].iter_mut().zip(gs) {
                    *acc += x * scale;
                }
            }
        }
        let grad_norm = norm(&grads);
        if !grad_norm.is_finite() {
            return Err(self.dump(model, &indices, grad_norm, "gradient norm"));
        }
        let clip = if grad_norm > tc.clip_norm { tc.clip_norm / grad_norm } else { 1.0 };
        let lr = learning_rate(tc.lr, self.step, tc.steps, tc.warmup_frac);
        let t = (self.step + 1) as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        if lr > 0.0 {
            for (i, p) in model.store.tensors_mut().iter_mut().enumerate() {
                let decay = if p.shape().len() == 2 { tc.weight_decay } else { 0.0 };
                let m = self.opt.m[i].data_mut();
                let v = self.opt.v[i].data_mut();
                for (k, w) in p.data_mut().iter_mut().enumerate() {
                    let g = grads[i][k] * clip;
                    m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
                    v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
                    let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
                    *w -= lr * (update + decay * *w);
                }
            }
        }
        let rec = StepRecord { step: self.step, loss, streaming_term: stream, lm_term: lm, grad_norm };
        self.step += 1;
        Ok(rec)
    }

    fn dump(&self, model: &FastSlowModel, indices: &[usize], value: f64, what: &str) -> Error {
        let path = self.dump_dir.join(format!("nonfinite-step{}.json", self.step));
        let ids: Vec<&str> = indices.iter().map(|&i| self.samples[i].id.as_str()).collect();
        let non_finite: Vec<&str> = model.store.iter().filter(|(_, _, t)| !t.is_finite()).map(|(_, n, _)| n).collect();
        let body = serde_json::json!({
            "step": self.step,
            "what": what,
            "value": value.to_string(),
            "samples": ids,
            "non_finite_params": non_finite,
            "param_checksum": model.store.checksum(),
            "config_hash": model.config().hash(),
        });
        let written = fs::create_dir_all(&self.dump_dir)
            .and_then(|_| fs::write(&path, serde_json::to_string_pretty(&body).unwrap_or_default()));
        let place = match written {
            Ok(()) => path.display().to_string(),
            Err(e) => format!("unwritten ({e})"),
        };
        Error::Numeric(format!("non-finite {what} {value} at step {}; dump: {place}", self.step))
    }

    pub fn save_checkpoint(&self, model: &FastSlowModel, manifest: &Path) -> Result<()> {
        let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        let mut extra: Vec<(String, &Tensor)> = Vec::with_capacity(2 * names.len());
        for (i, n) in names.iter().enumerate() {
            extra.push((format!("adam.m.{n}"), &self.opt.m[i]));
        }
        for (i, n) in names.iter().enumerate() {
            extra.push((format!("adam.v.{n}"), &self.opt.v[i]));
        }
        model.store.save(manifest, &model.config().hash(), self.step, &extra)?;
        Ok(())
    }

    pub fn header(&self, model: &FastSlowModel) -> LogHeader {
        let cfg = model.config();
        LogHeader {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            n_params: model.store.num_scalars(),
            n_samples: self.samples.len(),
            steps: cfg.train.steps,
            start_step: self.step,
        }
    }

    /// Runs until `train.steps`, calling `on_step` after every update.
    pub fn run(&mut self, model: &mut FastSlowModel, on_step: impl FnMut(&Self, &FastSlowModel, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let total = model.config().train.steps as u64;
        self.run_until(model, total, on_step)
    }

    /// Like [`Trainer::run`] but stops at `stop` (capped by `train.steps`)
    /// without altering the learning-rate schedule.
    pub fn run_until(
        &mut self,
        model: &mut FastSlowModel,
        stop: u64,
        mut on_step: impl FnMut(&Self, &FastSlowModel, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let total = stop.min(model.config().train.steps as u64);
        let mut out = Vec::new();
        while self.step < total {
            let rec = self.step(model)?;
            on_step(self, model, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// Writes a JSON-lines training log: the header, then one record per step.
pub fn write_log(path: &Path, header: &LogHeader, records: &[StepRecord], append: bool) -> Result<()> {
    let mut text = String::new();
    if !append {
        text.push_str(&serde_json::to_string(header)?);
        text.push('\n');
    }
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    if append {
        use std::io::Write;
        fs::OpenOptions::new().append(true).create(true).open(path)?.write_all(text.as_bytes())?;
    } else {
        fs::write(path, text)?;
    }
    Ok(())
}

/// Reads the step records of a training log, skipping the header.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.contains("\"config_hash\"") {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}
