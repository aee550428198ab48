use std::collections::BTreeSet;

use serde::Serialize;

use super::DownstreamError;

/// Precision, recall and F1 with the counts behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl Prf {
    fn from_counts(tp: usize, predicted: usize, actual: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (precision, recall) = (ratio(tp, predicted), ratio(tp, actual));
        let f1 = if predicted == 0 && actual == 0 {
            // nothing to find and nothing claimed
            1.0
        } else if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            true_positives: tp,
            predicted,
            actual,
        }
    }

    /// True when both sides were empty and F1 is reported as 1 by convention.
    pub fn vacuous(&self) -> bool {
        self.predicted == 0 && self.actual == 0
    }
}

/// Pair-level scores: a predicted `(concept position, instance position)`
/// counts only if the same message has exactly that gold pair.
pub fn eval_ci_pairs(
    predicted: &[Vec<(usize, usize)>],
    gold: &[Vec<(usize, usize)>],
) -> Result<Prf, DownstreamError> {
    if predicted.len() != gold.len() {
        return Err(DownstreamError::Misaligned(format!(
            "{} predicted messages vs {} gold messages",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let p: BTreeSet<_> = p.iter().collect();
        let g: BTreeSet<_> = g.iter().collect();
        tp += p.intersection(&g).count();
        np += p.len();
        ng += g.len();
    }
    Ok(Prf::from_counts(tp, np, ng))
}

/// Binary scores with `true` (anomalous) as the positive class.
pub fn eval_binary(predictions: &[bool], labels: &[bool]) -> Result<Prf, DownstreamError> {
    if predictions.len() != labels.len() {
        return Err(DownstreamError::Misaligned(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let tp = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p && **l)
        .count();
    let np = predictions.iter().filter(|p| **p).count();
    let nl = labels.iter().filter(|l| **l).count();
    Ok(Prf::from_counts(tp, np, nl))
}

/// Fraction of cases whose true class is among the first `k` ranked classes.
pub fn recall_at_k(
    rankings: &[Vec<usize>],
    labels: &[usize],
    k: usize,
) -> Result<f64, DownstreamError> {
    if rankings.len() != labels.len() {
        return Err(DownstreamError::Misaligned(format!(
            "{} rankings vs {} labels",
            rankings.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.iter().take(k).any(|c| c == *l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn pair_scores_by_hand() {
        let perfect =
            eval_ci_pairs(&[vec![(0, 1)], vec![(2, 3)]], &[vec![(0, 1)], vec![(2, 3)]]).unwrap();
        assert_eq!(
            (perfect.precision, perfect.recall, perfect.f1),
            (1.0, 1.0, 1.0)
        );
        let none = eval_ci_pairs(&[vec![]], &[vec![(0, 1)]]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        // 3 predicted, 2 correct, 4 gold
        let p = eval_ci_pairs(
            &[vec![(0, 1), (2, 3)], vec![(4, 5)]],
            &[vec![(0, 1), (2, 3), (6, 7)], vec![(4, 6)]],
        )
        .unwrap();
        assert!(close(p.precision, 2.0 / 3.0) && close(p.recall, 0.5));
        assert!(close(p.f1, 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5)));
        assert!((p.f1 - 0.571).abs() < 1e-3);
        // positions matter, not just counts
        let swapped = eval_ci_pairs(&[vec![(1, 0)]], &[vec![(0, 1)]]).unwrap();
        assert_eq!(swapped.true_positives, 0);
        let empty = eval_ci_pairs(&[vec![]], &[vec![]]).unwrap();
        assert!(empty.vacuous() && empty.f1 == 1.0);
        assert!(eval_ci_pairs(&[vec![]], &[]).is_err());
    }

    #[test]
    fn binary_scores_by_hand() {
        let l = [true, true, true, false, false];
        let p = [true, true, false, true, false];
        let s = eval_binary(&p, &l).unwrap();
        assert!(
            close(s.precision, 2.0 / 3.0) && close(s.recall, 2.0 / 3.0) && close(s.f1, 2.0 / 3.0)
        );
        assert_eq!(eval_binary(&[false; 5], &l).unwrap().recall, 0.0);
        assert_eq!(eval_binary(&l, &l).unwrap().f1, 1.0);
        assert!(eval_binary(&[true], &l).is_err());
    }

    #[test]
    fn recall_at_k_counts_hits() {
        let r = vec![vec![2, 0, 1], vec![0, 1, 2], vec![1, 2, 0]];
        let l = [0, 0, 0];
        assert!(close(recall_at_k(&r, &l, 1).unwrap(), 1.0 / 3.0));
        assert!(close(recall_at_k(&r, &l, 2).unwrap(), 2.0 / 3.0));
        assert_eq!(recall_at_k(&r, &l, 3).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn pair_scores_match_set_oracle(
            msgs in prop::collection::vec(
                (prop::collection::vec((0usize..6, 0usize..6), 0..5), prop::collection::vec((0usize..6, 0usize..6), 0..5)),
                1..8)
        ) {
            let (pred, gold): (Vec<_>, Vec<_>) = msgs.into_iter().unzip();
            let s = eval_ci_pairs(&pred, &gold).unwrap();
            let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
            for (p, g) in pred.iter().zip(&gold) {
                let mut p = p.clone(); p.sort(); p.dedup();
                let mut g = g.clone(); g.sort(); g.dedup();
                tp += p.iter().filter(|x| g.contains(x)).count();
                np += p.len();
                ng += g.len();
            }
            prop_assert_eq!((s.true_positives, s.predicted, s.actual), (tp, np, ng));
            prop_assert!(s.f1 >= 0.0 && s.f1 <= 1.0);
        }

        #[test]
        fn recall_is_monotone_in_k(
            cases in prop::collection::vec((Just((0..5).collect::<Vec<usize>>()).prop_shuffle(), 0usize..5), 1..20)
        ) {
            let (r, l): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
            let mut prev = 0.0;
            for k in 1..=5 {
                let v = recall_at_k(&r, &l, k).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }
}
