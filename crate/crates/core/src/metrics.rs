//! Imbalance-aware classification metrics derived from a confusion matrix.
//!
//! Zero-division conventions: a class with no predictions and no true
//! samples has F1 = 0; a class with no true samples contributes recall 0;
//! MCC is 0 whenever either denominator factor vanishes.

use crate::error::{Error, Result};

/// `counts[i][j]` = number of samples with true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Recall of class `i`, 0 when the class has no true samples.
    pub fn recall(&self, i: usize) -> f64 {
        ratio(self.get(i, i), self.row_sum(i))
    }

    pub fn precision(&self, i: usize) -> f64 {
        ratio(self.get(i, i), self.col_sum(i))
    }

    /// F1 of class `i`; 0 when the class has no true samples.
    pub fn f1(&self, i: usize) -> f64 {
        if self.row_sum(i) == 0 {
            return 0.0;
        }
        let (p, r) = (self.precision(i), self.recall(i));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        let bad = if t >= classes { t } else { p };
        if t >= classes || p >= classes {
            return Err(Error::Class {
                class: bad,
                classes,
            });
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    if cm.classes == 0 {
        return 0.0;
    }
    (0..cm.classes).map(|i| cm.f1(i)).sum::<f64>() / cm.classes as f64
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    if cm.classes == 0 {
        return 0.0;
    }
    (0..cm.classes).map(|i| cm.recall(i)).sum::<f64>() / cm.classes as f64
}

/// Multiclass Matthews correlation coefficient (row/column-sum form).
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total() as f64;
    let c = cm.classes;
    let t: Vec<f64> = (0..c).map(|k| cm.row_sum(k) as f64).collect();
    let p: Vec<f64> = (0..c).map(|k| cm.col_sum(k) as f64).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let numerator = n * cm.trace() as f64 - tp;
    let pred_factor = n * n - p.iter().map(|x| x * x).sum::<f64>();
    let true_factor = n * n - t.iter().map(|x| x * x).sum::<f64>();
    if pred_factor <= 0.0 || true_factor <= 0.0 {
        return 0.0;
    }
    (numerator / (pred_factor.sqrt() * true_factor.sqrt())).clamp(-1.0, 1.0)
}

/// The three headline metrics together.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
    pub mcc: f64,
}

impl MetricSummary {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self {
            macro_f1: macro_f1(cm),
            balanced_accuracy: balanced_accuracy(cm),
            mcc: mcc(cm),
        }
    }

    pub fn evaluate(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        Ok(Self::from_confusion(&confusion(truth, predicted, classes)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(tp: u64, fn_: u64, fp: u64, tn: u64) -> ConfusionMatrix {
        // class 0 = positive
        ConfusionMatrix::from_counts(&[vec![tp, fn_], vec![fp, tn]]).unwrap()
    }

    fn binary_mcc(tp: f64, fn_: f64, fp: f64, tn: f64) -> f64 {
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den
        }
    }

    #[test]
    fn confusion_tallies_by_hand() {
        let truth = [0, 0, 1, 1, 1, 2, 2, 2, 2];
        let pred = [0, 1, 1, 1, 2, 2, 0, 2, 2];
        let cm = confusion(&truth, &pred, 3).unwrap();
        let want = [[1, 1, 0], [0, 2, 1], [1, 0, 3]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.get(i, j), want[i][j]);
            }
        }
        assert_eq!(cm.total(), 9);
    }

    #[test]
    fn confusion_edge_cases() {
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.trace(), 3);
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn binary_hand_example() {
        let cm = binary(2, 1, 1, 2);
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-12);
        assert!((balanced_accuracy(&cm) - 2.0 / 3.0).abs() < 1e-12);
        assert!((mcc(&cm) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_predictor() {
        // Both classes present, everything predicted as class 0.
        let cm = ConfusionMatrix::from_counts(&[vec![3, 0], vec![2, 0]]).unwrap();
        // class 0: P = 3/5, R = 1 -> F1 = 0.75; class 1: 0.
        assert!((macro_f1(&cm) - 0.375).abs() < 1e-12);
        assert!((balanced_accuracy(&cm) - 0.5).abs() < 1e-12);
        assert_eq!(mcc(&cm), 0.0);
        let cm3 = ConfusionMatrix::from_counts(&[vec![4, 0, 0], vec![2, 0, 0], vec![5, 0, 0]])
            .unwrap();
        assert!((balanced_accuracy(&cm3) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let cm = ConfusionMatrix::from_counts(&[vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 9]])
            .unwrap();
        assert_eq!(macro_f1(&cm), 1.0);
        assert_eq!(balanced_accuracy(&cm), 1.0);
        assert_eq!(mcc(&cm), 1.0);
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..5).prop_flat_map(|c| proptest::collection::vec(proptest::collection::vec(0u64..20, c), c))
    }

    proptest! {
        #[test]
        fn multiclass_mcc_matches_binary_formula(tp in 0u64..50, fn_ in 0u64..50, fp in 0u64..50, tn in 0u64..50) {
            let cm = binary(tp, fn_, fp, tn);
            let want = binary_mcc(tp as f64, fn_ as f64, fp as f64, tn as f64);
            prop_assert!((mcc(&cm) - want).abs() < 1e-12);
        }

        #[test]
        fn metrics_invariant_under_class_permutation(rows in matrix_strategy(), shift in 0usize..4) {
            let c = rows.len();
            let perm: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();
            let mut permuted = vec![vec![0u64; c]; c];
            for i in 0..c {
                for j in 0..c {
                    permuted[perm[i]][perm[j]] = rows[i][j];
                }
            }
            let a = ConfusionMatrix::from_counts(&rows).unwrap();
            let b = ConfusionMatrix::from_counts(&permuted).unwrap();
            prop_assert!((macro_f1(&a) - macro_f1(&b)).abs() < 1e-12);
            prop_assert!((balanced_accuracy(&a) - balanced_accuracy(&b)).abs() < 1e-12);
            prop_assert!((mcc(&a) - mcc(&b)).abs() < 1e-12);
        }

        #[test]
        fn metrics_stay_in_range(rows in matrix_strategy()) {
            let cm = ConfusionMatrix::from_counts(&rows).unwrap();
            let s = MetricSummary::from_confusion(&cm);
            prop_assert!((0.0..=1.0).contains(&s.macro_f1));
            prop_assert!((0.0..=1.0).contains(&s.balanced_accuracy));
            prop_assert!((-1.0..=1.0).contains(&s.mcc));
            let diagonal = (0..cm.classes()).all(|i| (0..cm.classes()).all(|j| i == j || cm.get(i, j) == 0));
            let all_present = (0..cm.classes()).all(|i| cm.row_sum(i) > 0);
            prop_assert_eq!(s.macro_f1 == 1.0, diagonal && all_present);
            prop_assert_eq!(s.balanced_accuracy == 1.0, diagonal && all_present);
        }
    }
}
