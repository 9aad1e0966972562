//! Support-weighted accuracy/F1 and per-dimension Pearson correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    /// Recall of the class.
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Classes that appear in the labels or the predictions.
    pub per_class: BTreeMap<usize, ClassScore>,
    pub weighted_acc: f64,
    pub weighted_f1: f64,
    /// Fraction of exactly matched predictions.
    pub micro_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_r: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from precision and recall; zero when both are zero.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class recall and F1 with support-weighted averages.
pub fn weighted_scores(preds: &[usize], labels: &[usize]) -> Result<EvalReport> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    // class -> (true positives, predicted count, support)
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&p, &y) in preds.iter().zip(labels) {
        counts.entry(p).or_default().1 += 1;
        let e = counts.entry(y).or_default();
        e.2 += 1;
        if p == y {
            e.0 += 1;
        }
    }
    let total = labels.len() as f64;
    let mut report = EvalReport::default();
    for (&c, &(tp, predicted, support)) in &counts {
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let score = ClassScore {
            accuracy: recall,
            precision,
            f1: f1(precision, recall),
            support,
        };
        let w = support as f64 / total;
        report.weighted_acc += w * score.accuracy;
        report.weighted_f1 += w * score.f1;
        report.per_class.insert(c, score);
    }
    report.micro_acc = ratio(counts.values().map(|c| c.0).sum(), labels.len());
    Ok(report)
}

/// Sample Pearson correlation.
pub fn pearson_r(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.len() < 2 {
        return Err(Error::Dimension(format!(
            "pearson needs two equal series of length >= 2, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len() as f64;
    let mx = preds.iter().sum::<f64>() / n;
    let my = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in preds.iter().zip(labels) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the series has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson R per column of row-major `dims`-wide predictions and labels.
pub fn pearson_per_dim(preds: &[Vec<f64>], labels: &[Vec<f64>], dims: usize) -> Result<Vec<f64>> {
    (0..dims)
        .map(|d| {
            let p: Vec<f64> = preds.iter().map(|r| r[d]).collect();
            let y: Vec<f64> = labels.iter().map(|r| r[d]).collect();
            pearson_r(&p, &y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let r = weighted_scores(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        assert_eq!(r.weighted_f1, 1.0);
        assert_eq!(r.weighted_acc, 1.0);
        assert!(r.per_class.values().all(|c| c.f1 == 1.0));
    }

    #[test]
    fn small_hand_example() {
        let r = weighted_scores(&[0, 1, 1], &[0, 0, 1]).unwrap();
        let c0 = &r.per_class[&0];
        let c1 = &r.per_class[&1];
        assert_eq!((c0.precision, c0.accuracy), (1.0, 0.5));
        assert_eq!((c1.precision, c1.accuracy), (0.5, 1.0));
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((c1.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.weighted_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_on_balanced_labels() {
        let labels: Vec<usize> = (0..30).map(|i| i / 10).collect();
        let r = weighted_scores(&[0; 30], &labels).unwrap();
        assert!((r.weighted_acc - 1.0 / 3.0).abs() < 1e-15);
        // class 0: P = 1/3, R = 1
        assert!((r.weighted_f1 - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn predicted_class_without_support() {
        let r = weighted_scores(&[2, 0], &[0, 0]).unwrap();
        assert_eq!(r.per_class[&2].support, 0);
        assert_eq!(r.per_class[&2].f1, 0.0);
        assert!((r.weighted_acc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(weighted_scores(&[], &[]).is_err());
        assert!(weighted_scores(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_r(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&[1.0, 2.0, 4.0], &[-1.0, -2.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        // x̄ = 2.75, ȳ = 5.25: Σdxdy = 15.25, Σdx² = 8.75, Σdy² = 26.75
        let x = [1.0, 2.0, 3.0, 5.0];
        let y = [2.0, 4.0, 6.0, 9.0];
        let want = 15.25 / (8.75f64 * 26.75).sqrt();
        assert!((pearson_r(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance() {
        assert!(matches!(
            pearson_r(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 3..30),
            a in 0.1f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
            if let Ok(r) = pearson_r(&xs, &ys) {
                let t: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                let r2 = pearson_r(&t, &ys).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn weighted_f1_bounded(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (p, y): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = weighted_scores(&p, &y).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.weighted_f1));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.weighted_acc));
            prop_assert!((r.weighted_acc - r.micro_acc).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_equals_macro_for_equal_supports() {
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 2, 2, 0];
        let r = weighted_scores(&preds, &labels).unwrap();
        let macro_f1 = r.per_class.values().map(|c| c.f1).sum::<f64>() / 3.0;
        assert!((r.weighted_f1 - macro_f1).abs() < 1e-15);
    }
}
