//! Combined streaming + language-model objective over one sequence.

use crate::error::{Error, Result};
use crate::sequence::{Supervision, SupervisionKind};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub streaming: Var,
    pub lm: Var,
}

/// Logit rows needed for `sup`, ascending and unique.
pub fn supervised_rows(sup: &[Supervision]) -> Vec<usize> {
    let mut rows: Vec<usize> = sup.iter().map(|s| s.pos).collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// `(w/N) * sum streaming NLL + (1/N) * sum LM NLL`. `logits` row `r`
/// belongs to sequence position `positions[r]`; `n_positions` is the full
/// sequence length `N`.
pub fn streaming_lm_loss(
    tape: &mut Tape,
    logits: Var,
    positions: &[usize],
    sup: &[Supervision],
    n_positions: usize,
    w: f64,
) -> Result<LossTerms> {
    if positions.len() != tape.value(logits).rows() {
        return Err(Error::Supervision(format!(
            "{} logit rows for {} positions",
            tape.value(logits).rows(),
            positions.len()
        )));
    }
    if n_positions == 0 {
        return Err(Error::Supervision("empty sequence".into()));
    }
    let row_of = |pos: usize| -> Result<usize> {
        if pos >= n_positions {
            return Err(Error::Supervision(format!("supervised position {pos} beyond sequence of {n_positions}")));
        }
        positions
            .iter()
            .position(|&p| p == pos)
            .ok_or_else(|| Error::Supervision(format!("no logits for supervised position {pos}")))
    };
    let inv_n = 1.0 / n_positions as f64;
    let mut stream = Vec::new();
    let mut lm = Vec::new();
    for s in sup {
        let r = row_of(s.pos)?;
        match s.kind {
            SupervisionKind::Streaming => stream.push((r, s.target as usize, w * inv_n)),
            SupervisionKind::Lm => lm.push((r, s.target as usize, inv_n)),
        }
    }
    let streaming = tape.nll(logits, &stream)?;
    let lm = tape.nll(logits, &lm)?;
    let total = tape.add(streaming, lm)?;
    Ok(LossTerms { total, streaming, lm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sup(pos: usize, target: u32, kind: SupervisionKind) -> Supervision {
        Supervision { pos, target, kind, corrupted: false }
    }

    #[test]
    fn uniform_single_position() {
        let mut tape = Tape::new();
        let l = tape.variable(Tensor::zeros(&[1, 8]));
        let t = streaming_lm_loss(&mut tape, l, &[2], &[sup(2, 1, SupervisionKind::Streaming)], 5, 1.0).unwrap();
        assert!((tape.value(t.total).item().unwrap() - 8f64.ln() / 5.0).abs() < 1e-15);
    }

    #[test]
    fn confident_predictor_has_zero_loss() {
        let mut tape = Tape::new();
        let mut data = vec![-1e4; 16];
        data[3] = 0.0;
        data[8 + 5] = 0.0;
        let l = tape.variable(Tensor::matrix(2, 8, data).unwrap());
        let s = [sup(0, 3, SupervisionKind::Streaming), sup(1, 5, SupervisionKind::Lm)];
        let t = streaming_lm_loss(&mut tape, l, &[0, 1], &s, 2, 1.0).unwrap();
        assert_eq!(tape.value(t.total).item().unwrap(), 0.0);
    }

    #[test]
    fn weight_scales_only_the_streaming_term() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = [sup(0, 1, SupervisionKind::Streaming), sup(1, 4, SupervisionKind::Lm), sup(2, 0, SupervisionKind::Streaming)];
        let terms = |w: f64| {
            let mut tape = Tape::new();
            let l = tape.variable(Tensor::matrix(3, 8, data.clone()).unwrap());
            let t = streaming_lm_loss(&mut tape, l, &[0, 1, 2], &s, 3, w).unwrap();
            [t.total, t.streaming, t.lm].map(|v| tape.value(v).item().unwrap())
        };
        let [a, sa, la] = terms(1.0);
        let [b, sb, lb] = terms(2.0);
        assert_eq!(la, lb);
        assert!((sb - 2.0 * sa).abs() < 1e-15);
        assert!((a - (sa + la)).abs() < 1e-12 && (b - (sb + lb)).abs() < 1e-12);
    }

    #[test]
    fn missing_rows_are_supervision_errors() {
        let mut tape = Tape::new();
        let l = tape.variable(Tensor::zeros(&[1, 8]));
        let e = streaming_lm_loss(&mut tape, l, &[0], &[sup(1, 1, SupervisionKind::Lm)], 3, 1.0);
        assert!(matches!(e, Err(Error::Supervision(_))));
        let e = streaming_lm_loss(&mut tape, l, &[0, 1], &[], 3, 1.0);
        assert!(matches!(e, Err(Error::Supervision(_))));
    }
}
