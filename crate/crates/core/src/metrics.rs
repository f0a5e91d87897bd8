//! Accuracy, per-class precision/recall/F1 and the support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// F1 averaged over classes, weighted by each class's share of samples.
    pub avg_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Precision or recall with an empty denominator reported as 0.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Support-weighted mean of per-class F1 scores.
pub fn averaged_f1(f1: &[f64], support: &[usize]) -> Result<f64> {
    let n: usize = support.iter().sum();
    if f1.len() != support.len() || n == 0 {
        return Err(Error::dim(
            "averaged_f1",
            format!("{} scores vs {} counts", f1.len(), support.len()),
        ));
    }
    Ok(f1.iter().zip(support).map(|(f, &s)| f * s as f64).sum::<f64>() / n as f64)
}

pub fn evaluate(truth: &[usize], predicted: &[usize], classes: usize) -> Result<MetricsReport> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::dim(
            "evaluate",
            format!("{} labels vs {} predictions", truth.len(), predicted.len()),
        ));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Contract(format!("label pair ({t}, {p}) outside 0..{classes}")));
        }
        confusion[t][p] += 1;
    }
    let n = truth.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(confusion[c][c], predicted_c);
            let recall = ratio(confusion[c][c], support);
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
            }
        })
        .collect();
    let f1: Vec<f64> = per_class.iter().map(|m| m.f1).collect();
    let support: Vec<usize> = per_class.iter().map(|m| m.support).collect();
    let avg_f1 = averaged_f1(&f1, &support)?;
    Ok(MetricsReport {
        accuracy: correct as f64 / n as f64,
        avg_f1,
        per_class,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_hand_counted() {
        let r = evaluate(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.avg_f1, 1.0);

        // truth 0 0 1 1, predicted 0 1 1 1: class 0 P=1 R=.5, class 1 P=2/3 R=1.
        let r = evaluate(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.accuracy, 0.75);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((r.avg_f1 - (2.0 / 3.0 * 2.0 + 0.8 * 2.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_average() {
        assert!((averaged_f1(&[0.8, 0.4], &[3, 1]).unwrap() - 0.7).abs() < 1e-15);
        assert!(averaged_f1(&[0.8], &[0]).is_err());
    }

    #[test]
    fn never_predicted_class_scores_zero() {
        let r = evaluate(&[0, 1], &[0, 0], 2).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!(evaluate(&[0], &[0, 1], 2).is_err());
        assert!(evaluate(&[3], &[0], 2).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_consistent(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = evaluate(&t, &p, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.avg_f1));
            let total: usize = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total, t.len());
            prop_assert_eq!(r.per_class.iter().map(|m| m.support).sum::<usize>(), t.len());
        }
    }
}
