//! Soft-target cross entropy, the min-max objective, and the 10-annotator
//! answer score.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

pub const ANNOTATORS: usize = 10;

/// Per-answer target weights, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    pub weights: Vec<f64>,
}

impl SoftTarget {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Data(format!("soft target weight {w} outside [0, 1]")));
        }
        Ok(Self { weights })
    }

    /// True when at least one answer carries weight.
    pub fn is_scorable(&self) -> bool {
        self.weights.iter().any(|&w| w > 0.0)
    }
}

/// Scalar values of one step's losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_vqa: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub lambda_adv: f64,
}

impl LossBreakdown {
    pub fn new(l_vqa: f64, l_adv: f64, lambda_adv: f64) -> Self {
        Self { l_vqa, l_adv, l_total: l_vqa - lambda_adv * l_adv, lambda_adv }
    }
}

/// Batch mean of `-sum_i a_i log p_i`.
pub fn soft_cross_entropy(tape: &mut Tape, log_probs: NodeId, targets: &[SoftTarget]) -> Result<NodeId> {
    let shape = tape.value(log_probs).shape().to_vec();
    let (rows, cols) = match shape.as_slice() {
        [r, c] => (*r, *c),
        s => return Err(Error::Dimension(format!("log-probs must be 2-D, got {s:?}"))),
    };
    if targets.len() != rows {
        return Err(Error::Dimension(format!("{rows} prediction rows but {} targets", targets.len())));
    }
    let mut weights = Vec::with_capacity(rows * cols);
    for t in targets {
        if t.weights.len() != cols {
            return Err(Error::Dimension(format!("target has {} classes, expected {cols}", t.weights.len())));
        }
        if let Some(w) = t.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Data(format!("soft target weight {w} outside [0, 1]")));
        }
        weights.extend_from_slice(&t.weights);
    }
    let weighted = tape.mul_const(log_probs, &Tensor::new(shape, weights)?)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// `l_vqa - lambda_adv * l_adv` as a tape node.
pub fn total_loss(tape: &mut Tape, l_vqa: NodeId, l_adv: NodeId, lambda_adv: f64) -> Result<NodeId> {
    if !(lambda_adv >= 0.0) || !lambda_adv.is_finite() {
        return Err(Error::Parameter(format!("lambda_adv must be finite and >= 0, got {lambda_adv}")));
    }
    let scaled = tape.scale(l_adv, lambda_adv)?;
    tape.sub(l_vqa, scaled)
}

fn count_weight(count: usize) -> f64 {
    (count as f64 / 3.0).min(1.0)
}

/// `weight(a) = min(count(a) / 3, 1)` over the ten annotator answers.
pub fn annotator_soft_targets(answers: &[usize], vocab_size: usize) -> Result<SoftTarget> {
    if answers.len() != ANNOTATORS {
        return Err(Error::Data(format!("expected {ANNOTATORS} annotator answers, got {}", answers.len())));
    }
    let mut counts = vec![0usize; vocab_size];
    for &a in answers {
        *counts
            .get_mut(a)
            .ok_or_else(|| Error::Data(format!("answer id {a} outside vocab of {vocab_size}")))? += 1;
    }
    Ok(SoftTarget { weights: counts.into_iter().map(count_weight).collect() })
}

/// Score of one predicted answer against the annotators.
pub fn vqa_score(predicted: usize, answers: &[usize]) -> f64 {
    count_weight(answers.iter().filter(|&&a| a == predicted).count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(log_probs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<f64> {
        let mut tape = Tape::new();
        let lp = tape.leaf(Tensor::from_rows(&log_probs)?)?;
        let t: Vec<SoftTarget> = targets.into_iter().map(|w| SoftTarget { weights: w }).collect();
        let l = soft_cross_entropy(&mut tape, lp, &t)?;
        Ok(tape.value(l).values()[0])
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(ce(vec![vec![0.0, f64::MIN_POSITIVE.ln()]], vec![vec![1.0, 0.0]]).unwrap(), 0.0);
        let quarter = 0.25f64.ln();
        let l = ce(vec![vec![quarter; 4]], vec![vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let half = 0.5f64.ln();
        let l = ce(vec![vec![half, half]], vec![vec![1.0, 0.3]]).unwrap();
        assert!((l - 1.3 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.9011).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_is_batch_mean() {
        let half = 0.5f64.ln();
        let l = ce(vec![vec![half, half], vec![0.0, -50.0]], vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        assert!(matches!(ce(vec![vec![0.0, -1.0]], vec![vec![1.2, 0.0]]), Err(Error::Data(_))));
        assert!(matches!(ce(vec![vec![0.0, -1.0]], vec![vec![-0.1, 0.0]]), Err(Error::Data(_))));
        assert!(matches!(ce(vec![vec![0.0, -1.0]], vec![vec![1.0]]), Err(Error::Dimension(_))));
        assert!(SoftTarget::new(vec![0.5, 2.0]).is_err());
    }

    fn total(l_vqa: f64, l_adv: f64, lambda: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(l_vqa))?;
        let b = tape.leaf(Tensor::scalar(l_adv))?;
        let t = total_loss(&mut tape, a, b, lambda)?;
        Ok(tape.value(t).values()[0])
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total(2.0, 1.0, 0.0).unwrap(), 2.0);
        assert!((total(2.0, 1.0, 0.01).unwrap() - 1.99).abs() < 1e-15);
        assert!(total(2.0, 1.5, 0.01).unwrap() < total(2.0, 1.0, 0.01).unwrap());
        assert!(matches!(total(2.0, 1.0, -0.1), Err(Error::Parameter(_))));
        let b = LossBreakdown::new(2.0, 1.0, 0.01);
        assert_eq!(b.l_total, 2.0 - 0.01 * 1.0);
        assert_eq!(b.l_total, total(2.0, 1.0, 0.01).unwrap());
    }

    #[test]
    fn total_loss_gradient_signs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let b = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let t = total_loss(&mut tape, a, b, 0.25).unwrap();
        tape.backward(t).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[-0.25]);
    }

    #[test]
    fn soft_targets_from_annotators() {
        let t = annotator_soft_targets(&[2; 10], 4).unwrap();
        assert_eq!(t.weights, vec![0.0, 0.0, 1.0, 0.0]);

        let t = annotator_soft_targets(&[0, 1, 1, 1, 1, 1, 1, 1, 1, 1], 3).unwrap();
        assert_eq!(t.weights[0], 1.0 / 3.0);

        // A:6, B:3, C:1
        let t = annotator_soft_targets(&[0, 0, 0, 0, 0, 0, 1, 1, 1, 2], 3).unwrap();
        assert_eq!(t.weights, vec![1.0, 1.0, 1.0 / 3.0]);

        assert!(matches!(annotator_soft_targets(&[0; 9], 3), Err(Error::Data(_))));
        assert!(matches!(annotator_soft_targets(&[5; 10], 3), Err(Error::Data(_))));
    }

    #[test]
    fn score_cases() {
        let ann = [0, 0, 1, 1, 1, 2, 2, 2, 2, 2];
        assert_eq!(vqa_score(3, &ann), 0.0);
        assert_eq!(vqa_score(1, &ann), 1.0);
        assert_eq!(vqa_score(0, &ann), 2.0 / 3.0);
        assert_eq!(vqa_score(2, &ann), 1.0);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn score_is_order_invariant(mut ann in proptest::collection::vec(0usize..5, 10), pred in 0usize..5, rot in 0usize..10) {
                let s = vqa_score(pred, &ann);
                ann.rotate_left(rot);
                ann.reverse();
                prop_assert_eq!(s, vqa_score(pred, &ann));
            }

            #[test]
            fn cross_entropy_is_nonnegative(
                logits in proptest::collection::vec(-20.0f64..20.0, 6),
                weights in proptest::collection::vec(0.0f64..=1.0, 6),
            ) {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(vec![2, 3], logits).unwrap()).unwrap();
                let lp = tape.log_softmax(x).unwrap();
                let targets: Vec<SoftTarget> = weights.chunks(3).map(|w| SoftTarget { weights: w.to_vec() }).collect();
                let l = soft_cross_entropy(&mut tape, lp, &targets).unwrap();
                prop_assert!(tape.value(l).values()[0] >= 0.0);
            }
        }
    }
}
