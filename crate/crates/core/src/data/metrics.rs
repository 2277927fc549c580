//! Classification metrics.

use crate::error::{Error, Result};

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", pred.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    Ok(pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64)
}

/// Area under the ROC curve from average ranks (Mann–Whitney U); ties count
/// one half.
pub fn auc_score(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives keeps tie-averaged ranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let twice_avg = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += pos * twice_avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// `counts[gold][pred]`.
pub fn confusion(pred: &[usize], gold: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (p, g) in pred.iter().zip(gold) {
        if *p < n_classes && *g < n_classes {
            m[*g][*p] += 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut twice = 0u64;
        let mut pairs = 0u64;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1;
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn examples() {
        assert_eq!(auc_score(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_score(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc_score(&[0.1, 0.4, 0.4, 0.8], &[false, false, true, true]).unwrap(), 0.875);
        assert!(matches!(auc_score(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        assert_eq!(accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&[], &[]).is_err());
        assert_eq!(confusion(&[1, 0, 1], &[1, 1, 0], 2), vec![vec![0, 1], vec![1, 1]]);
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 * 0.25).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            prop_assert_eq!(auc_score(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }
    }
}
