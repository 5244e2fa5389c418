//! Ranking and calibration metrics.

use crate::error::{HhftError, Result};

fn check_binary(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(bad) => Err(HhftError::Data(format!("label {bad} is not binary"))),
        None => Ok(()),
    }
}

/// Twice the Mann-Whitney statistic (ties count one half, hence the
/// doubling) together with the positive and negative counts.
fn doubled_u(scores: &[f64], labels: &[f64]) -> Result<(u128, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(HhftError::shape("auc", &[scores.len()], &[labels.len()]));
    }
    check_binary(labels)?;
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(HhftError::Data(format!("score {s} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut u2, mut pos_total) = (0u64, 0u128, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut neg) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal, so group with == rather than total_cmp.
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        u2 += 2 * u128::from(pos) * u128::from(neg_below) + u128::from(pos) * u128::from(neg);
        neg_below += neg;
        pos_total += pos;
    }
    Ok((u2, pos_total, neg_below))
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counted one half. `O(N log N)`.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (u2, pos, neg) = doubled_u(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(HhftError::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok(u2 as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64)
}

/// Mean binary cross-entropy of logits.
pub fn logloss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(HhftError::shape("logloss", &[logits.len()], &[labels.len()]));
    }
    check_binary(labels)?;
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
        .sum();
    Ok(total / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[f64]) -> f64 {
        let (mut wins2, mut pos, mut neg) = (0u128, 0u128, 0u128);
        for i in 0..scores.len() {
            if labels[i] == 1.0 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    wins2 += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        wins2 as f64 / (2 * pos * neg) as f64
    }

    #[test]
    fn examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3], &[0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(HhftError::UndefinedMetric(_))));
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 2.0]), Err(HhftError::Data(_))));
    }

    #[test]
    fn logloss_closed_form() {
        assert!((logloss(&[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(logloss(&[100.0], &[1.0]).unwrap() < 1e-40);
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((logloss(&[1.0, -1.0], &[1.0, 0.0]).unwrap() - expect).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle_with_ties(
            raw in prop::collection::vec((0u8..20, any::<bool>()), 2..300)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 4.0).collect();
            let labels: Vec<f64> = raw.iter().map(|(_, y)| f64::from(u8::from(*y))).collect();
            let (p, n) = (labels.iter().filter(|&&y| y == 1.0).count(), labels.iter().filter(|&&y| y == 0.0).count());
            prop_assume!(p > 0 && n > 0);
            let a = auc(&scores, &labels).unwrap();
            prop_assert_eq!(a, pairwise(&scores, &labels));
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
            prop_assert_eq!(auc(&exp, &labels).unwrap(), a);
            prop_assert_eq!(auc(&affine, &labels).unwrap(), a);
        }
    }
}
