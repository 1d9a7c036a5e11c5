use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of one binary head. Every ratio with a zero denominator is
/// reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub n_labelled: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl HeadMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        HeadMetrics { n_labelled: c.total(), accuracy: ratio(c.tp + c.tn, c.total()), precision, recall, f1, confusion: c }
    }
}

/// Result of scoring a split. Top-level metrics describe the primary
/// (protest) head;
/// `heads` has one entry per output head, with absent labels skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub threshold: f32,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub heads: IndexMap<String, HeadMetrics>,
}

impl EvalReport {
    /// `probs[i][h]` against `targets[i][h]`; a prediction is positive when
    /// the probability reaches `threshold`, a target when it is ≥ 0.5.
    pub fn from_predictions(heads: &[String], primary: usize, probs: &[Vec<f32>], targets: &[Vec<Option<f32>>], losses: &[f32], threshold: f32) -> Self {
        let mut conf = vec![Confusion::default(); heads.len()];
        for (p, t) in probs.iter().zip(targets) {
            for (h, c) in conf.iter_mut().enumerate() {
                if let Some(y) = t[h] {
                    c.record(p[h] >= threshold, y >= 0.5);
                }
            }
        }
        let per: IndexMap<String, HeadMetrics> = heads.iter().cloned().zip(conf.into_iter().map(HeadMetrics::from_confusion)).collect();
        let primary = per[primary];
        let loss = if losses.is_empty() { 0.0 } else { losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64 };
        EvalReport {
            n_examples: probs.len(),
            threshold,
            loss,
            accuracy: primary.accuracy,
            precision: primary.precision,
            recall: primary.recall,
            f1: primary.f1,
            confusion: primary.confusion,
            heads: per,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(probs: &[f32], targets: &[f32]) -> EvalReport {
        let p: Vec<Vec<f32>> = probs.iter().map(|&x| vec![x]).collect();
        let t: Vec<Vec<Option<f32>>> = targets.iter().map(|&y| vec![Some(y)]).collect();
        EvalReport::from_predictions(&["protest".into()], 0, &p, &t, &[], 0.5)
    }

    #[test]
    fn all_correct() {
        let r = report(&[0.9, 0.1, 0.7], &[1.0, 0.0, 1.0]);
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
    }

    #[test]
    fn three_of_four() {
        let r = report(&[0.9, 0.1, 0.7, 0.6], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion, Confusion { tp: 2, fp: 1, tn: 1, fn_: 0 });
    }

    #[test]
    fn all_negative_predictor_has_defined_zeros() {
        let r = report(&[0.1, 0.2], &[1.0, 1.0]);
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn threshold_is_inclusive_and_absent_labels_skip() {
        let p = vec![vec![0.5, 0.9], vec![0.2, 0.9]];
        let t = vec![vec![Some(1.0), None], vec![Some(0.0), Some(1.0)]];
        let r = EvalReport::from_predictions(&["a".into(), "b".into()], 0, &p, &t, &[], 0.5);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.heads["b"].n_labelled, 1);
    }
}
