//! Evaluation: perplexity, token correctness, fluency and response timing,
//! plus report assembly and CSV export for sweeps.

use serde::{Deserialize, Serialize};

use crate::config::PplScope;
use crate::dataset::StreamSample;
use crate::engine::{run_sample, EngineOptions, EpisodeLog};
use crate::error::{Error, Result};
use crate::flops::flops_estimate;
use crate::loss::supervised_rows;
use crate::model::{argmax, determine};
use crate::sequence::{Supervision, SupervisionKind};
use crate::system::FastSlowModel;
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::Tensor;
use crate::vocab::{self, TokenId};

/// One teacher-forced prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub kind: SupervisionKind,
    pub target: TokenId,
    pub predicted: TokenId,
    pub nll: f64,
    pub corrupted: bool,
}

impl Scored {
    pub fn hit(&self) -> bool {
        self.predicted == self.target
    }

    fn is_text(&self) -> bool {
        self.kind == SupervisionKind::Lm && self.target != vocab::TURN_END
    }
}

/// Scores `sup` against logits whose row `r` sits at sequence position
/// `rows[r]`. Determinations use the RESPOND/SILENCE pair rule, response
/// tokens the full argmax.
pub fn score_logits(logits: &Tensor, rows: &[usize], sup: &[Supervision], threshold: Option<f64>) -> Result<Vec<Scored>> {
    if logits.rows() != rows.len() {
        return Err(Error::Metric(format!("{} logit rows for {} positions", logits.rows(), rows.len())));
    }
    sup.iter()
        .map(|s| {
            let r = rows
                .iter()
                .position(|&p| p == s.pos)
                .ok_or_else(|| Error::Metric(format!("no logits at position {}", s.pos)))?;
            let row = logits.row(r);
            let t = s.target as usize;
            if t >= row.len() {
                return Err(Error::Index(format!("target {t} outside vocabulary of {}", row.len())));
            }
            let predicted = match s.kind {
                SupervisionKind::Streaming => {
                    if determine(row, threshold).respond {
                        vocab::RESPOND
                    } else {
                        vocab::SILENCE
                    }
                }
                SupervisionKind::Lm => argmax(row) as TokenId,
            };
            Ok(Scored { kind: s.kind, target: s.target, predicted, nll: log_sum_exp(row) - row[t], corrupted: s.corrupted })
        })
        .collect()
}

/// Teacher-forced scores for one sample.
pub fn score_sample(model: &FastSlowModel, sample: &StreamSample) -> Result<Vec<Scored>> {
    let p = model.prepare(sample)?;
    let rows = supervised_rows(&p.plan.supervision);
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let logits = model.logits_at(&p, &rows)?;
    score_logits(&logits, &rows, &p.plan.supervision, model.config().model.respond_threshold)
}

fn kept(s: &&Scored, include_corrupted: bool) -> bool {
    include_corrupted || !s.corrupted
}

fn rate<'a>(it: impl Iterator<Item = &'a Scored>, what: &str) -> Result<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for s in it {
        hits += s.hit() as usize;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric(format!("no positions for {what}")));
    }
    Ok(hits as f64 / n as f64)
}

/// `exp` of the mean NLL over the supervised set chosen by `scope`.
pub fn lm_ppl(scores: &[Scored], scope: PplScope, include_corrupted: bool) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in scores.iter().filter(|s| kept(s, include_corrupted)) {
        if scope == PplScope::LmOnly && s.kind != SupervisionKind::Lm {
            continue;
        }
        sum += s.nll;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("no supervised positions for perplexity".into()));
    }
    Ok((sum / n as f64).exp())
}

/// Argmax match rate over response text tokens.
pub fn lm_correctness(scores: &[Scored], include_corrupted: bool) -> Result<f64> {
    rate(scores.iter().filter(|s| kept(s, include_corrupted) && s.is_text()), "correctness")
}

pub fn determination_accuracy(scores: &[Scored]) -> Result<f64> {
    rate(scores.iter().filter(|s| s.kind == SupervisionKind::Streaming), "determination accuracy")
}

/// Match rate over determinations and response text tokens together.
pub fn fluency(scores: &[Scored], include_corrupted: bool) -> Result<f64> {
    rate(
        scores
            .iter()
            .filter(|s| kept(s, include_corrupted) && (s.kind == SupervisionKind::Streaming || s.is_text())),
        "fluency",
    )
}

/// Per-turn timing charges. Expected turns, in time order, each take the
/// nearest unmatched response (earlier wins a tie); a turn left without one
/// is charged `penalty`, or its distance to `stream_end`.
pub fn time_diff_charges(expected: &[f64], actual: &[f64], stream_end: f64, penalty: Option<f64>) -> Vec<f64> {
    let mut order: Vec<usize> = (0..expected.len()).collect();
    order.sort_by(|&a, &b| expected[a].total_cmp(&expected[b]));
    let mut used = vec![false; actual.len()];
    let mut charges = vec![0.0; expected.len()];
    for i in order {
        let e = expected[i];
        let best = (0..actual.len())
            .filter(|&j| !used[j])
            .min_by(|&a, &b| (actual[a] - e).abs().total_cmp(&(actual[b] - e).abs()).then(actual[a].total_cmp(&actual[b])));
        charges[i] = match best {
            Some(j) => {
                used[j] = true;
                (actual[j] - e).abs()
            }
            None => penalty.unwrap_or((stream_end - e).max(0.0)),
        };
    }
    charges
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeDiff {
    pub mean: f64,
    pub n_turns: usize,
    /// No expected turns; `mean` is reported as 0.
    pub empty: bool,
}

pub fn time_diff(expected: &[f64], actual: &[f64], stream_end: f64, penalty: Option<f64>) -> TimeDiff {
    let c = time_diff_charges(expected, actual, stream_end, penalty);
    if c.is_empty() {
        return TimeDiff { mean: 0.0, n_turns: 0, empty: true };
    }
    TimeDiff { mean: c.iter().sum::<f64>() / c.len() as f64, n_turns: c.len(), empty: false }
}

/// Timing charges of a logged episode against its ground truth.
pub fn log_time_charges(log: &EpisodeLog, sample: &StreamSample, penalty: Option<f64>) -> Vec<f64> {
    time_diff_charges(&sample.expected_times(), &log.response_times(), sample.stream_end(), penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub lm_ppl: f64,
    pub lm_correctness: f64,
    pub time_diff: f64,
    pub fluency: f64,
    pub determination_accuracy: f64,
    /// Mean analytic multiply-accumulates per episode.
    pub flops: f64,
    pub n_episodes: usize,
    pub n_turns: usize,
    /// Frame bundles, one per determination.
    pub n_frames: usize,
    pub n_responses: usize,
    pub ppl_scope: PplScope,
    pub include_corrupted: bool,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: &str =
    "label,lm_ppl,lm_correctness,time_diff,fluency,determination_accuracy,flops,n_episodes,n_turns,n_frames,n_responses,config_hash";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.label.as_deref().unwrap_or(""),
            self.lm_ppl,
            self.lm_correctness,
            self.time_diff,
            self.fluency,
            self.determination_accuracy,
            self.flops,
            self.n_episodes,
            self.n_turns,
            self.n_frames,
            self.n_responses,
            self.config_hash
        )
    }
}

pub fn to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Runs every metric over `samples` and the FLOPs accountant over their
/// teacher-forced layouts.
pub fn build_report(model: &FastSlowModel, samples: &[StreamSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Metric("no episodes to evaluate".into()));
    }
    let cfg = model.config();
    let mc = &cfg.metrics;
    let hash = cfg.hash();
    let mut warnings = Vec::new();
    let mismatched = samples.iter().filter(|s| s.config_hash != hash).count();
    if mismatched > 0 {
        warnings.push(format!("{mismatched} episode(s) were generated under a different config hash"));
    }
    let mut scores = Vec::new();
    let mut charges = Vec::new();
    let mut flops = 0.0;
    let (mut n_frames, mut n_responses) = (0, 0);
    let opts = EngineOptions { slow_path: cfg.slow_path.enabled, record_logits: false, record_latency: false };
    for s in samples {
        let p = model.prepare(s)?;
        let rows = supervised_rows(&p.plan.supervision);
        if !rows.is_empty() {
            let logits = model.logits_at(&p, &rows)?;
            scores.extend(score_logits(&logits, &rows, &p.plan.supervision, cfg.model.respond_threshold)?);
        }
        flops += flops_estimate(&cfg.model, &cfg.dropping, &p.plan.slots)?.total as f64;
        let (log, _) = run_sample(model, s, opts.clone())?;
        n_frames += log.determinations().count();
        n_responses += log.responses().count();
        charges.extend(log_time_charges(&log, s, mc.unmatched_penalty));
    }
    if charges.is_empty() {
        warnings.push("no expected turns; time_diff reported as 0".into());
    }
    Ok(EvalReport {
        label: None,
        lm_ppl: lm_ppl(&scores, mc.ppl_scope, mc.include_corrupted)?,
        lm_correctness: lm_correctness(&scores, mc.include_corrupted).unwrap_or(0.0),
        time_diff: if charges.is_empty() { 0.0 } else { charges.iter().sum::<f64>() / charges.len() as f64 },
        fluency: fluency(&scores, mc.include_corrupted)?,
        determination_accuracy: determination_accuracy(&scores)?,
        flops: flops / samples.len() as f64,
        n_episodes: samples.len(),
        n_turns: charges.len(),
        n_frames,
        n_responses,
        ppl_scope: mc.ppl_scope,
        include_corrupted: mc.include_corrupted,
        config_hash: hash,
        seed: cfg.seed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sup(pos: usize, target: TokenId, kind: SupervisionKind) -> Supervision {
        Supervision { pos, target, kind, corrupted: false }
    }

    /// 20 determinations (2 respond) and 5 words plus TURN_END per response.
    fn stream_case() -> Vec<Supervision> {
        let mut s = Vec::new();
        let mut pos = 0;
        for b in 0..20 {
            let respond = b == 5 || b == 14;
            s.push(sup(pos, if respond { vocab::RESPOND } else { vocab::SILENCE }, SupervisionKind::Streaming));
            pos += 1;
            if respond {
                for w in [vocab::OBJECT, vocab::ENTERS, vocab::TOP_LEFT, vocab::OBJECT, vocab::LEAVES, vocab::TURN_END] {
                    s.push(sup(pos, w, SupervisionKind::Lm));
                    pos += 1;
                }
            }
        }
        s
    }

    fn constant_logits(n: usize, v: usize, hot: Option<usize>) -> Tensor {
        let mut data = vec![0.0; n * v];
        if let Some(h) = hot {
            for r in 0..n {
                data[r * v + h] = 5.0;
            }
        }
        Tensor::matrix(n, v, data).unwrap()
    }

    #[test]
    fn always_silent_predictor_fluency() {
        let s = stream_case();
        let rows: Vec<usize> = (0..s.len()).collect();
        let scores = score_logits(&constant_logits(s.len(), 32, Some(vocab::SILENCE as usize)), &rows, &s, None).unwrap();
        assert!((fluency(&scores, false).unwrap() - 18.0 / 30.0).abs() < 1e-15);
        assert_eq!(lm_correctness(&scores, false).unwrap(), 0.0);
    }

    #[test]
    fn uniform_predictor_ppl_is_vocab_size() {
        let s = stream_case();
        let rows: Vec<usize> = (0..s.len()).collect();
        let scores = score_logits(&constant_logits(s.len(), 32, None), &rows, &s, None).unwrap();
        assert!((lm_ppl(&scores, PplScope::All, false).unwrap() - 32.0).abs() < 1e-12);
        assert!((lm_ppl(&scores, PplScope::LmOnly, false).unwrap() - 32.0).abs() < 1e-12);
    }

    #[test]
    fn seven_of_ten_correct() {
        let targets = [7u32, 8, 9, 10, 11, 12, 13, 14, 15, 16];
        let s: Vec<Supervision> = targets.iter().enumerate().map(|(i, &t)| sup(i, t, SupervisionKind::Lm)).collect();
        let mut data = vec![0.0; 10 * 32];
        for (i, &t) in targets.iter().enumerate() {
            let p = if i < 7 { t } else { 30 };
            data[i * 32 + p as usize] = 1.0;
        }
        let scores = score_logits(&Tensor::matrix(10, 32, data).unwrap(), &(0..10).collect::<Vec<_>>(), &s, None).unwrap();
        assert!((lm_correctness(&scores, false).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn corrupted_turns_excluded_by_default() {
        let mut s = stream_case();
        for x in s.iter_mut().filter(|x| x.kind == SupervisionKind::Lm).take(6) {
            x.corrupted = true;
        }
        let rows: Vec<usize> = (0..s.len()).collect();
        let mut data = vec![0.0; s.len() * 32];
        for (i, x) in s.iter().enumerate() {
            data[i * 32 + x.target as usize] = 1.0;
        }
        let mut scores = score_logits(&Tensor::matrix(s.len(), 32, data).unwrap(), &rows, &s, None).unwrap();
        for x in scores.iter_mut().filter(|x| x.corrupted) {
            x.predicted = 30;
        }
        assert_eq!(lm_correctness(&scores, false).unwrap(), 1.0);
        assert!(lm_correctness(&scores, true).unwrap() < 1.0);
    }

    #[test]
    fn time_diff_hand_cases() {
        assert_eq!(time_diff(&[3.0], &[3.5], 10.0, None).mean, 0.5);
        assert_eq!(time_diff(&[1.0, 4.0], &[1.0, 4.0], 10.0, None).mean, 0.0);
        assert_eq!(time_diff(&[9.0], &[], 10.0, None).mean, 1.0);
        assert_eq!(time_diff(&[9.0], &[], 10.0, Some(3.0)).mean, 3.0);
        let empty = time_diff(&[], &[2.0], 10.0, None);
        assert!(empty.empty && empty.mean == 0.0);
        // Each actual response matches at most one expected turn.
        assert_eq!(time_diff_charges(&[2.0, 2.5], &[2.0], 10.0, None), vec![0.0, 7.5]);
    }

    #[test]
    fn streaming_scores_follow_the_pair_rule() {
        let s = [sup(0, vocab::RESPOND, SupervisionKind::Streaming)];
        let mut data = vec![0.0; 32];
        data[vocab::RESPOND as usize] = 1.0;
        data[20] = 9.0;
        let scores = score_logits(&Tensor::matrix(1, 32, data).unwrap(), &[0], &s, None).unwrap();
        assert!(scores[0].hit());
    }

    #[test]
    fn csv_has_one_column_per_header_field() {
        let r = EvalReport {
            label: Some("beta=0.5".into()),
            lm_ppl: 2.0,
            lm_correctness: 0.5,
            time_diff: 0.25,
            fluency: 0.75,
            determination_accuracy: 0.9,
            flops: 1e6,
            n_episodes: 1,
            n_turns: 2,
            n_frames: 20,
            n_responses: 2,
            ppl_scope: PplScope::All,
            include_corrupted: false,
            config_hash: "ab".into(),
            seed: 1,
            warnings: vec![],
        };
        let csv = to_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("beta=0.5,2,0.5,0.25,0.75"));
    }
}
