use proptest::prelude::*;
use re_tagger_core::*;

/// Counts directly from the pairs, without a confusion matrix.
fn oracle(pred: &[usize], truth: &[usize], c: usize) -> (f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

proptest! {
    #[test]
    fn metrics_match_counting_oracle(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..300)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let labels = |v: &[usize]| v.iter().map(|&i| ClassLabel::ALL[i]).collect::<Vec<_>>();
        let report = per_class_metrics(&confusion(&labels(&pred), &labels(&truth)).unwrap());
        for c in 0..6 {
            let (p, r, f) = oracle(&pred, &truth, c);
            let m = report.metrics(ClassLabel::ALL[c]);
            prop_assert!((m.precision - p).abs() <= 1e-12);
            prop_assert!((m.recall - r).abs() <= 1e-12);
            prop_assert!((m.f1 - f).abs() <= 1e-12);
        }
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64;
        prop_assert!((report.accuracy - correct / pred.len() as f64).abs() <= 1e-12);
    }
}
