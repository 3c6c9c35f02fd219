//! Evaluation formulas over confusion matrices and timing data, and report
//! rendering. Every 0/0 ratio is defined as 0.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

fn invalid(msg: impl Into<String>) -> MetricsError {
    MetricsError::InvalidArgument(msg.into())
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("class count must be positive"));
        }
        Ok(Self {
            k,
            counts: vec![0; k * k],
            total: 0,
        })
    }

    /// Builds a matrix from paired label and prediction streams.
    pub fn from_pairs(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(invalid(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new(k)?;
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.accumulate(t, p)?;
        }
        Ok(cm)
    }

    pub fn accumulate(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(invalid(format!(
                "class pair ({truth}, {predicted}) outside 0..{}",
                self.k
            )));
        }
        self.counts[truth * self.k + predicted] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    /// Row sum: number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
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

/// One-vs-rest `(precision, recall, f1)` for class `c`.
pub fn per_class_metrics(cm: &ConfusionMatrix, c: usize) -> Result<(f64, f64, f64)> {
    if c >= cm.k {
        return Err(invalid(format!("class {c} outside 0..{}", cm.k)));
    }
    let tp = cm.get(c, c);
    let fp: u64 = (0..cm.k).filter(|&r| r != c).map(|r| cm.get(r, c)).sum();
    let fn_: u64 = (0..cm.k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok((precision, recall, f1_score(precision, recall)))
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total == 0 {
        return Err(invalid("accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / cm.total as f64)
}

/// `(mean_ms, fps)` from a total processing time.
pub fn timing_metrics(total_ms: f64, frames: u64) -> Result<(f64, f64)> {
    if frames == 0 {
        return Err(invalid("frame count must be positive"));
    }
    if !(total_ms > 0.0 && total_ms.is_finite()) {
        return Err(invalid(format!("total time {total_ms} ms must be positive")));
    }
    let mean = total_ms / frames as f64;
    Ok((mean, 1000.0 / mean))
}

/// Percentage drop from `before` to `after`; negative when defects increased.
pub fn defect_reduction_rate(before: f64, after: f64) -> Result<f64> {
    if !(before > 0.0 && before.is_finite()) {
        return Err(invalid(format!("defects before adjustment must be positive, got {before}")));
    }
    if !(after >= 0.0 && after.is_finite()) {
        return Err(invalid(format!("defects after adjustment must be nonnegative, got {after}")));
    }
    Ok((before - after) / before * 100.0)
}

/// Percentage of successful adjustments; 0 when no action was taken.
pub fn correction_rate(successful: u64, total_actions: u64) -> Result<f64> {
    if successful > total_actions {
        return Err(invalid(format!("{successful} successes out of {total_actions} actions")));
    }
    Ok(100.0 * ratio(successful, total_actions))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub class_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub total: u64,
    pub timing: Option<Timing>,
}

impl MetricsReport {
    /// `labels` names each class in index order.
    pub fn from_confusion(cm: &ConfusionMatrix, labels: &[&str], timing: Option<Timing>) -> Result<Self> {
        if labels.len() != cm.k {
            return Err(invalid(format!("{} labels for {} classes", labels.len(), cm.k)));
        }
        let mut classes = Vec::with_capacity(cm.k);
        for (c, label) in labels.iter().enumerate() {
            let (precision, recall, f1) = per_class_metrics(cm, c)?;
            classes.push(ClassMetrics {
                label: (*label).to_owned(),
                class_id: c,
                precision,
                recall,
                f1,
                support: cm.support(c),
            });
        }
        let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / classes.len() as f64;
        Ok(Self {
            accuracy: accuracy(cm)?,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            total: cm.total,
            classes,
            timing,
        })
    }

    /// Fixed-width table with the columns Label, Class, precision, Recall,
    /// F1-score, Test Sample; values at 2 decimals.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>9} {:>6} {:>8} {:>11}",
            "Label", "Class", "precision", "Recall", "F1-score", "Test Sample"
        );
        for m in &self.classes {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>9.2} {:>6.2} {:>8.2} {:>11}",
                m.label, m.class_id, m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>9.2} {:>6.2} {:>8.2} {:>11}",
            "macro", "-", self.macro_precision, self.macro_recall, self.macro_f1, self.total
        );
        let _ = writeln!(s, "accuracy {:.2}", self.accuracy);
        if let Some(t) = self.timing {
            let _ = writeln!(s, "inference {:.2} ms/frame, {:.2} FPS", t.mean_ms, t.fps);
        }
        s
    }

    /// One `class` line per class, then one `summary` line. Floats keep full
    /// precision.
    pub fn render_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct ClassLine<'a> {
            record: &'static str,
            #[serde(flatten)]
            m: &'a ClassMetrics,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            accuracy: f64,
            macro_precision: f64,
            macro_recall: f64,
            macro_f1: f64,
            total: u64,
            timing: &'a Option<Timing>,
        }
        let mut s = String::new();
        for m in &self.classes {
            s.push_str(&serde_json::to_string(&ClassLine { record: "class", m }).expect("serializable"));
            s.push('\n');
        }
        let summary = Summary {
            record: "summary",
            accuracy: self.accuracy,
            macro_precision: self.macro_precision,
            macro_recall: self.macro_recall,
            macro_f1: self.macro_f1,
            total: self.total,
            timing: &self.timing,
        };
        s.push_str(&serde_json::to_string(&summary).expect("serializable"));
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_tally() {
        let cm = ConfusionMatrix::from_pairs(2, &[0, 1, 1], &[1, 1, 0]).unwrap();
        assert_eq!(cm.rows(), vec![vec![0, 1], vec![1, 1]]);
        assert_eq!(cm.total(), 3);
        let mut cm = ConfusionMatrix::new(4).unwrap();
        assert!(cm.accumulate(4, 0).is_err());
        cm.accumulate(2, 2).unwrap();
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn empty_matrix_ratios_are_zero() {
        let cm = ConfusionMatrix::new(4).unwrap();
        assert_eq!(per_class_metrics(&cm, 0).unwrap(), (0.0, 0.0, 0.0));
        assert!(accuracy(&cm).is_err());
    }

    #[test]
    fn recall_of_49_in_50() {
        let mut truth = vec![0; 50];
        let mut pred = vec![0; 49];
        pred.push(1);
        truth.extend([1; 10]);
        pred.extend([1; 10]);
        let cm = ConfusionMatrix::from_pairs(4, &truth, &pred).unwrap();
        let (_, r, _) = per_class_metrics(&cm, 0).unwrap();
        assert!((r - 0.98).abs() < 1e-15);
    }

    #[test]
    fn formula_values() {
        assert!((f1_score(0.96, 0.98) - 2.0 * 0.96 * 0.98 / 1.94).abs() < 1e-15);
        assert_eq!(defect_reduction_rate(100.0, 27.0).unwrap(), 73.0);
        assert_eq!(defect_reduction_rate(50.0, 75.0).unwrap(), -50.0);
        assert!(defect_reduction_rate(0.0, 1.0).is_err());
        assert_eq!(correction_rate(89, 100).unwrap(), 89.0);
        assert_eq!(correction_rate(0, 0).unwrap(), 0.0);
        assert_eq!(correction_rate(3, 4).unwrap(), 75.0);
        assert!(correction_rate(5, 4).is_err());
        assert_eq!(timing_metrics(1000.0, 10).unwrap(), (100.0, 10.0));
        assert!((timing_metrics(32.4, 1).unwrap().1 - 30.864_197_530_864_2).abs() < 1e-9);
        assert!(timing_metrics(1.0, 0).is_err());
    }

    #[test]
    fn accuracy_extremes() {
        let cm = ConfusionMatrix::from_pairs(4, &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_pairs(4, &[0, 1, 2, 3], &[1, 2, 3, 0]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
    }

    #[test]
    fn report_layout() {
        let cm = ConfusionMatrix::from_pairs(4, &[0, 1, 2, 3, 3], &[0, 1, 2, 3, 2]).unwrap();
        let r = MetricsReport::from_confusion(&cm, &["Crack", "Pinhole", "Hole", "Spatter"], None).unwrap();
        let text = r.render_text();
        assert_eq!(text.lines().count(), 1 + 4 + 1 + 1);
        assert_eq!(text, r.render_text());
        assert!(text.contains("0.67"));
        let jsonl = r.render_jsonl();
        assert_eq!(jsonl.lines().count(), 5);
        let last: serde_json::Value = serde_json::from_str(jsonl.lines().last().unwrap()).unwrap();
        assert_eq!(last["accuracy"], 0.8);
        assert_eq!(r.classes.iter().map(|c| c.support).sum::<u64>(), r.total);
    }

    proptest! {
        #[test]
        fn ratios_bounded(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let cm = ConfusionMatrix::from_pairs(4, &t, &p).unwrap();
            for c in 0..4 {
                let (pr, re, f1) = per_class_metrics(&cm, c).unwrap();
                for v in [pr, re, f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if pr > 0.0 && re > 0.0 {
                    prop_assert!(f1 <= pr.max(re) + 1e-15 && f1 >= pr.min(re) - 1e-15);
                }
            }
            prop_assert!((0.0..=1.0).contains(&accuracy(&cm).unwrap()));
        }

        #[test]
        fn full_reduction(b in 1u32..1_000_000) {
            prop_assert_eq!(defect_reduction_rate(b as f64, 0.0).unwrap(), 100.0);
        }

        #[test]
        fn mean_times_fps_is_1000(total in 0.001f64..1e6, frames in 1u64..100_000) {
            let (m, f) = timing_metrics(total, frames).unwrap();
            prop_assert!((m * f - 1000.0).abs() < 1e-9);
        }
    }
}
