//! Binary classification metrics over positive-class scores.

use std::fmt;

/// Area under the ROC curve via the Mann-Whitney statistic with mid-ranks
/// for ties. `None` when either class is absent.
///
/// The statistic is accumulated as the integer `2U`, so the result is the
/// correctly rounded value of `(#pos > neg + 0.5 * #ties) / (n_pos * n_neg)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of twice their (mid-)rank
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        // ranks i+1 ..= j share the mid-rank (i + 1 + j) / 2
        twice_rank_sum += pos_in_group * (i as u64 + 1 + j as u64);
        i = j;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Predicts positive when `score >= threshold`.
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        if n == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / n as f64
    }

    /// F1 of the positive class; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub auroc: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Self {
        let c = Confusion::at_threshold(scores, labels, DECISION_THRESHOLD);
        Self {
            auroc: auroc(scores, labels),
            accuracy: c.accuracy(),
            f1: c.f1(),
            n_pos: c.tp + c.fn_,
            n_neg: c.tn + c.fp,
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.auroc {
            Some(a) => writeln!(f, "auroc = {a:.6}")?,
            None => writeln!(f, "auroc = undefined")?,
        }
        writeln!(f, "accuracy = {:.6}", self.accuracy)?;
        writeln!(f, "f1 = {:.6}", self.f1)?;
        writeln!(f, "n_pos = {}", self.n_pos)?;
        writeln!(f, "n_neg = {}", self.n_neg)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn auroc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels), Some(1.0));
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels), Some(0.0));
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auroc(&[0.3, 0.7], &[true, true]), None);
        assert_eq!(auroc(&[], &[]), None);
    }

    #[test]
    fn perfect_report() {
        let r = MetricsReport::compute(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]);
        assert_eq!((r.auroc, r.accuracy, r.f1, r.n_pos, r.n_neg), (Some(1.0), 1.0, 1.0, 2, 2));
        let text = r.to_string();
        assert!(text.starts_with("auroc = 1.000000\naccuracy = 1.000000\n"), "{text}");
        let single = MetricsReport::compute(&[0.9], &[true]);
        assert!(single.to_string().contains("auroc = undefined"));
    }

    #[test]
    fn random_scores_average_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let mut n = 0;
        for _ in 0..1000 {
            let scores: Vec<f64> = (0..40).map(|_| rng.gen()).collect();
            let labels: Vec<bool> = (0..40).map(|_| rng.gen()).collect();
            if let Some(a) = auroc(&scores, &labels) {
                total += a;
                n += 1;
            }
        }
        let mean = total / n as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_oracle(
            data in proptest::collection::vec((0u8..12, any::<bool>()), 0..120)
        ) {
            // coarse score grid forces many ties
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 11.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assert_eq!(auroc(&scores, &labels), pairwise(&scores, &labels));
        }

        #[test]
        fn confusion_counts_match_direct(
            data in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..80)
        ) {
            let scores: Vec<f64> = data.iter().map(|x| x.0).collect();
            let labels: Vec<bool> = data.iter().map(|x| x.1).collect();
            let c = Confusion::at_threshold(&scores, &labels, 0.5);
            let correct = data.iter().filter(|(s, l)| (*s >= 0.5) == *l).count();
            prop_assert_eq!(c.accuracy(), correct as f64 / data.len() as f64);
            let tp = data.iter().filter(|(s, l)| *s >= 0.5 && *l).count();
            let pred = data.iter().filter(|(s, _)| *s >= 0.5).count();
            let pos = data.iter().filter(|(_, l)| *l).count();
            let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (pred + pos) as f64 };
            prop_assert_eq!(c.f1(), f1);
        }
    }
}
