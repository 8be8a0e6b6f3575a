//! Accuracy-adaptive allocation of the synthetic sample budget.
//!
//! Classes with lower training accuracy receive a larger share:
//! `share = softmax(1 - acc)`, then the real-valued shares of the budget are
//! rounded to integers that sum to the budget exactly.

use std::cmp::Ordering;

use crate::classifier::ClassAccuracyVector;

/// Integer synthetic budget per class for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    /// Samples to synthesize per class.
    pub counts: Vec<usize>,
    /// Total budget; always `counts.iter().sum()`.
    pub total: usize,
    /// Real-valued shares before rounding.
    pub fractions: Vec<f64>,
}

impl AllocationPlan {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// Class label of every chain, grouped by class in ascending order.
    pub fn labels(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(class, &k)| std::iter::repeat_n(class, k))
            .collect()
    }
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Allocate `total` synthetic samples from per-class accuracy.
pub fn allocate(acc: &ClassAccuracyVector, total: usize) -> AllocationPlan {
    let errors: Vec<f64> = acc.values().iter().map(|a| 1.0 - a).collect();
    let fractions = softmax(&errors);
    AllocationPlan {
        counts: largest_remainder_round(&fractions, total),
        total,
        fractions,
    }
}

/// Equal shares `total / classes`, rounded the same way.
pub fn uniform(classes: usize, total: usize) -> AllocationPlan {
    let fractions = vec![1.0 / classes as f64; classes];
    AllocationPlan {
        counts: largest_remainder_round(&fractions, total),
        total,
        fractions,
    }
}

/// Floor every `fraction * total`, then hand the leftover units to the
/// largest remainders. Ties go to the lower class index.
pub fn largest_remainder_round(fractions: &[f64], total: usize) -> Vec<usize> {
    if fractions.is_empty() {
        return Vec::new();
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Shares that sum to slightly more than one can overshoot after flooring;
    // take units back from the smallest remainders first.
    if assigned > total {
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            ra.partial_cmp(&rb).unwrap_or(Ordering::Equal).then(b.cmp(&a))
        });
        let mut excess = assigned - total;
        for &i in order.iter().cycle() {
            if excess == 0 {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                excess -= 1;
            }
        }
        return counts;
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let leftover = total - assigned;
    for &i in order.iter().cycle().take(leftover) {
        counts[i] += 1;
    }
    counts
}
