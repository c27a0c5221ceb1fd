//! Slide-level confusion counts, balanced error and ROC.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn fnr(&self) -> Result<f64> {
        if self.positives() == 0 {
            return Err(Error::UndefinedMetric("false-negative rate without positive slides".into()));
        }
        Ok(self.fn_ as f64 / self.positives() as f64)
    }

    pub fn fpr(&self) -> Result<f64> {
        if self.negatives() == 0 {
            return Err(Error::UndefinedMetric("false-positive rate without negative slides".into()));
        }
        Ok(self.fp as f64 / self.negatives() as f64)
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

fn check_aligned(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Argument("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Argument(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Argument("non-finite score".into()));
    }
    Ok(())
}

/// A score at or above `threshold` is a positive call.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_aligned(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Mean of the false-positive and false-negative rates.
pub fn balanced_error(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(0.5 * (cm.fnr()? + cm.fpr()?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// From threshold +inf at (0, 0) down to -inf at (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}

/// Thresholds sit at every distinct score. The area is accumulated on
/// integer counts so tied blocks contribute exactly half a unit per pair.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_aligned(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let point = |threshold: f64, fp: usize, tp: usize| RocPoint {
        threshold,
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
    };
    let mut points = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Twice the area in units of (negative, positive) pairs.
    let mut doubled: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled += ((fp - fp0) * (tp + tp0)) as u128;
        points.push(point(s, fp, tp));
    }
    points.push(point(f64::NEG_INFINITY, fp, tp));
    let auc = doubled as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve { points, auc })
}

/// False-negative rate, false-positive rate and balanced error at `threshold`.
pub fn error_rates(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64, f64)> {
    let cm = confusion(scores, labels, threshold)?;
    Ok((cm.fnr()?, cm.fpr()?, balanced_error(&cm)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn concordance(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        total += 1.0;
                    } else if scores[i] == scores[j] {
                        total += 0.5;
                    }
                }
            }
        }
        total / pairs
    }

    #[test]
    fn confusion_counts() {
        let cm = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 0, tn: 1, fn_: 0 });
        assert_eq!(confusion(&[0.5], &[0], 0.5).unwrap().fp, 1);
        assert!(matches!(confusion(&[], &[], 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn balanced_error_examples() {
        let cm = ConfusionMatrix { tp: 9, fn_: 1, tn: 8, fp: 2 };
        assert!((balanced_error(&cm).unwrap() - 0.15).abs() < 1e-15);
        let all_pos = confusion(&[1.0; 4], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(balanced_error(&all_pos).unwrap(), 0.5);
        let one_class = ConfusionMatrix { tp: 3, ..Default::default() };
        assert!(matches!(balanced_error(&one_class), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn balanced_error_ignores_prevalence_at_fixed_rates() {
        let a = ConfusionMatrix { tp: 9, fn_: 1, tn: 8, fp: 2 };
        let b = ConfusionMatrix { tp: 90, fn_: 10, tn: 8, fp: 2 };
        assert!((balanced_error(&a).unwrap() - balanced_error(&b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn roc_examples() {
        let r = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 0]).unwrap();
        assert_eq!(r.auc, 0.5);
        let first = r.points.first().unwrap();
        let last = r.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    fn trapezoid(points: &[RocPoint]) -> f64 {
        points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
    }

    proptest! {
        #[test]
        fn auc_matches_concordance(
            data in prop::collection::vec((0u8..12, 0u8..2), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 11.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let r = roc_auc(&scores, &labels).unwrap();
            prop_assert!((r.auc - concordance(&scores, &labels)).abs() <= 1e-12);
            prop_assert!((r.auc - trapezoid(&r.points)).abs() <= 1e-12);
            for w in r.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
                prop_assert!(w[1].threshold < w[0].threshold);
            }
        }

        #[test]
        fn auc_invariant_under_increasing_transform(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..100)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap().auc, roc_auc(&moved, &labels).unwrap().auc);
        }

        #[test]
        fn confusion_matches_loop(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..100),
            threshold in 0.0f64..1.0,
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            let cm = confusion(&scores, &labels, threshold).unwrap();
            let mut tp = 0;
            let mut fp = 0;
            for i in 0..scores.len() {
                if scores[i] >= threshold {
                    if labels[i] == 1 { tp += 1 } else { fp += 1 }
                }
            }
            prop_assert_eq!((cm.tp, cm.fp), (tp, fp));
            prop_assert_eq!(cm.total(), scores.len());
        }
    }
}
