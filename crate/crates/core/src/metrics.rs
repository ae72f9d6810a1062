//! Confusion matrices, per-class metrics and comparison tables.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::Label;
use crate::prompts::format_score;
use crate::verdict::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
}

/// Positive class is malicious. Error outcomes sit outside the four cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub errors: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_ + self.errors
    }

    pub fn add(&mut self, prediction: Outcome, label: Label) {
        match (prediction, label) {
            (Outcome::Error, _) => self.errors += 1,
            (Outcome::Malicious, Label::Malicious) => self.tp += 1,
            (Outcome::Malicious, Label::Benign) => self.fp += 1,
            (Outcome::Benign, Label::Benign) => self.tn += 1,
            (Outcome::Benign, Label::Malicious) => self.fn_ += 1,
        }
    }
}

pub fn confusion(predictions: &[Outcome], labels: &[Label]) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        cm.add(p, l);
    }
    Ok(cm)
}

/// `num / den`, with 0/0 taken as 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ClassMetrics {
    fn from_counts(hit: u64, false_pos: u64, false_neg: u64) -> Self {
        let (h, p, n) = (hit as f64, false_pos as f64, false_neg as f64);
        let precision = ratio(h, h + p);
        let recall = ratio(h, h + n);
        ClassMetrics { precision, recall, f1: ratio(2.0 * precision * recall, precision + recall), support: hit + false_neg }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub benign: ClassMetrics,
    pub malicious: ClassMetrics,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let malicious = ClassMetrics::from_counts(cm.tp, cm.fp, cm.fn_);
    let benign = ClassMetrics::from_counts(cm.tn, cm.fn_, cm.fp);
    let scored = (cm.tp + cm.tn + cm.fp + cm.fn_) as f64;
    Metrics {
        benign,
        malicious,
        accuracy: ratio((cm.tp + cm.tn) as f64, scored),
        balanced_accuracy: (malicious.recall + benign.recall) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: String,
    pub fingerprint: String,
    pub seed: u64,
    pub confusion: ConfusionMatrix,
    pub benign: ClassMetrics,
    pub malicious: ClassMetrics,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub errors: u64,
    pub total: u64,
}

impl MetricsReport {
    pub fn new(config: impl Into<String>, fingerprint: impl Into<String>, seed: u64, cm: ConfusionMatrix) -> Self {
        let m = metrics(&cm);
        MetricsReport {
            config: config.into(),
            fingerprint: fingerprint.into(),
            seed,
            confusion: cm,
            benign: m.benign,
            malicious: m.malicious,
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
            errors: cm.errors,
            total: cm.total(),
        }
    }
}

fn row(cells: &[&str], widths: &[usize]) -> String {
    let mut s = String::from("|");
    for (c, w) in cells.iter().zip(widths) {
        s.push_str(&format!(" {c:<w$} |"));
    }
    s.push('\n');
    s
}

fn rule(widths: &[usize]) -> String {
    let mut s = String::from("|");
    for w in widths {
        s.push_str(&"-".repeat(w + 2));
        s.push('|');
    }
    s.push('\n');
    s
}

fn render(header: &[&str], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = row(header, &widths);
    out.push_str(&rule(&widths));
    for r in body {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        out.push_str(&row(&cells, &widths));
    }
    out
}

/// Precision, recall and F1 blocks with one row per report, in input
/// order, and Benign/Malicious columns; followed by a summary block.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut body = Vec::new();
    let blocks: [(&str, fn(&ClassMetrics) -> f64); 3] =
        [("Precision", |c| c.precision), ("Recall", |c| c.recall), ("F1-score", |c| c.f1)];
    for (name, get) in blocks {
        for (i, r) in reports.iter().enumerate() {
            body.push(alloc::vec![
                if i == 0 { name.into() } else { String::new() },
                r.config.clone(),
                format_score(get(&r.benign)),
                format_score(get(&r.malicious)),
            ]);
        }
    }
    let mut out = render(&["Metric", "Config", "Benign", "Malicious"], &body);
    out.push('\n');
    let summary: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            alloc::vec![
                r.config.clone(),
                format_score(r.accuracy),
                format_score(r.balanced_accuracy),
                format!("{}/{}", r.errors, r.total),
            ]
        })
        .collect();
    out.push_str(&render(&["Config", "Accuracy", "Balanced accuracy", "Errors"], &summary));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAL: Outcome = Outcome::Malicious;
    const BEN: Outcome = Outcome::Benign;
    const ERR: Outcome = Outcome::Error;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[MAL, BEN], &[Label::Malicious, Label::Benign]).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (1, 1, 0, 0));
        let cm = confusion(&[MAL, MAL], &[Label::Benign, Label::Benign]).unwrap();
        assert_eq!(cm.fp, 2);
        let cm = confusion(&[ERR, MAL], &[Label::Malicious, Label::Malicious]).unwrap();
        assert_eq!((cm.errors, cm.tp, cm.total()), (1, 1, 2));
        assert_eq!(
            confusion(&[MAL], &[]),
            Err(MetricsError::LengthMismatch { predictions: 1, labels: 0 })
        );
    }

    #[test]
    fn perfect_classifier() {
        let m = metrics(&ConfusionMatrix { tp: 277, tn: 753, ..Default::default() });
        for v in [m.accuracy, m.balanced_accuracy, m.malicious.precision, m.malicious.recall, m.malicious.f1, m.benign.f1] {
            assert_eq!(v, 1.0);
        }
        assert_eq!((m.malicious.support, m.benign.support), (277, 753));
    }

    #[test]
    fn arithmetic_example() {
        let m = metrics(&ConfusionMatrix { tp: 50, fp: 10, fn_: 50, tn: 90, errors: 0 });
        assert!((m.malicious.precision - 50.0 / 60.0).abs() < 1e-12);
        assert_eq!(m.malicious.recall, 0.5);
        assert!((m.malicious.f1 - 0.625).abs() < 1e-12);
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.balanced_accuracy - 0.7).abs() < 1e-12);
        assert!((m.benign.precision - 90.0 / 140.0).abs() < 1e-12);
        assert!((m.benign.recall - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empty_matrix_is_all_zero() {
        let m = metrics(&ConfusionMatrix { errors: 3, ..Default::default() });
        assert_eq!(m, Metrics::default());
    }

    #[test]
    fn table_cells() {
        let perfect = MetricsReport::new("perfect", "f", 0, ConfusionMatrix { tp: 3, tn: 3, ..Default::default() });
        let t = render_table(core::slice::from_ref(&perfect));
        let cells: Vec<&str> = t.lines().take(5).skip(2).flat_map(|l| l.split('|').skip(3).take(2)).map(str::trim).collect();
        assert_eq!(cells, ["1.00"; 6]);

        let derived = MetricsReport::new("derived", "f", 0, ConfusionMatrix { tp: 50, fp: 10, fn_: 50, tn: 90, errors: 0 });
        let t = render_table(&[perfect, derived]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[2].starts_with("| Precision | perfect"));
        assert!(lines[3].contains("| derived") && lines[3].contains("0.64") && lines[3].contains("0.83"));
        assert!(lines[5].contains("| derived") && lines[5].contains("0.90") && lines[5].contains("0.50"));
        assert!(lines[4].starts_with("| Recall    | perfect"));
        assert!(t.contains("| derived | 0.70     | 0.70              | 0/200  |"));
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<(Outcome, Label)>> {
        proptest::collection::vec(
            (prop_oneof![Just(MAL), Just(BEN), Just(ERR)], prop_oneof![Just(Label::Malicious), Just(Label::Benign)]),
            1..200,
        )
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_consistent(pairs in arb_pairs()) {
            let (p, l): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let cm = confusion(&p, &l).unwrap();
            prop_assert_eq!(cm.total() as usize, p.len());
            let m = metrics(&cm);
            for v in [m.accuracy, m.balanced_accuracy, m.benign.precision, m.benign.recall, m.benign.f1,
                      m.malicious.precision, m.malicious.recall, m.malicious.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(m.balanced_accuracy, (m.malicious.recall + m.benign.recall) / 2.0);
            let scored = (cm.tp + cm.tn + cm.fp + cm.fn_) as f64;
            if scored > 0.0 {
                let weighted = (m.malicious.recall * m.malicious.support as f64 + m.benign.recall * m.benign.support as f64) / scored;
                prop_assert!((weighted - m.accuracy).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_invariant(pairs in arb_pairs(), rot in 0usize..200) {
            let (p, l): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            let n = shuffled.len();
            shuffled.rotate_left(rot % n);
            shuffled.reverse();
            let (p2, l2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(metrics(&confusion(&p, &l).unwrap()), metrics(&confusion(&p2, &l2).unwrap()));
        }
    }
}
