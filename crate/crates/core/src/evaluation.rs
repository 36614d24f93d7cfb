//! Confusion matrices and macro-averaged classification metrics.
//!
//! Rows are true classes, columns are predicted classes. Headline precision,
//! recall and F1 are macro (unweighted) means: for single-label data the micro
//! averages all collapse to accuracy.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AVERAGING_NOTE: &str =
    "macro averages: unweighted mean over classes; rows = true class, columns = predicted class";

#[derive(Error, Debug)]
pub enum EvaluationError {
    #[error("{truths} truths but {preds} predictions")]
    LengthMismatch { truths: usize, preds: usize },
    #[error("label {label} out of range for {classes} classes")]
    UnknownLabel { label: usize, classes: usize },
    #[error("unknown class name {0:?}")]
    UnknownClass(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// CSV with class names along the header row and first column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvaluationError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let header = std::iter::once("true\\predicted").chain(self.class_names.iter().map(String::as_str));
        w.write_record(header).map_err(csv_io)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let cells = std::iter::once(name.clone()).chain(row.iter().map(u64::to_string));
            w.write_record(cells).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> EvaluationError {
    EvaluationError::Io(std::io::Error::other(e))
}

/// Tallies `(truth, prediction)` pairs given as class indices.
pub fn confusion_matrix(
    truths: &[usize],
    preds: &[usize],
    class_names: &[String],
) -> Result<ConfusionMatrix, EvaluationError> {
    if truths.len() != preds.len() {
        return Err(EvaluationError::LengthMismatch {
            truths: truths.len(),
            preds: preds.len(),
        });
    }
    let k = class_names.len();
    let mut cm = ConfusionMatrix::zeros(class_names.to_vec());
    for (&t, &p) in truths.iter().zip(preds) {
        for label in [t, p] {
            if label >= k {
                return Err(EvaluationError::UnknownLabel { label, classes: k });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Same as [`confusion_matrix`] with labels given by name.
pub fn confusion_matrix_by_name(
    truths: &[&str],
    preds: &[&str],
    class_names: &[String],
) -> Result<ConfusionMatrix, EvaluationError> {
    let index = |name: &str| {
        class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| EvaluationError::UnknownClass(name.to_string()))
    };
    let t: Vec<usize> = truths.iter().map(|n| index(n)).collect::<Result<_, _>>()?;
    let p: Vec<usize> = preds.iter().map(|n| index(n)).collect::<Result<_, _>>()?;
    confusion_matrix(&t, &p, class_names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Row sum: number of true examples of this class.
    pub support: u64,
    /// Set when the zero-division convention was applied.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub total: u64,
    pub per_class: Vec<ClassMetrics>,
    pub averaging: String,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let (precision, precision_undefined) = ratio(tp, cm.col_sum(c));
            let (recall, recall_undefined) = ratio(tp, cm.row_sum(c));
            let f1_undefined = precision + recall == 0.0;
            let f1 = if f1_undefined {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                class_name: cm.class_names[c].clone(),
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
                precision_undefined,
                recall_undefined,
                f1_undefined,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    MetricsReport {
        accuracy: ratio(cm.trace(), cm.total()).0,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        total: cm.total(),
        averaging: AVERAGING_NOTE.to_string(),
        per_class,
    }
}

/// Classes whose F1 is below `threshold`, lowest F1 first.
pub fn per_class_flags(report: &MetricsReport, threshold: f64) -> Vec<String> {
    let mut flagged: Vec<(usize, &ClassMetrics)> = report
        .per_class
        .iter()
        .enumerate()
        .filter(|(_, m)| m.f1 < threshold)
        .collect();
    flagged.sort_by(|a, b| a.1.f1.total_cmp(&b.1.f1).then(a.0.cmp(&b.0)));
    flagged.into_iter().map(|(_, m)| m.class_name.clone()).collect()
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String, EvaluationError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per class followed by a `macro` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvaluationError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["class", "precision", "recall", "f1", "support"])
            .map_err(csv_io)?;
        for m in &self.per_class {
            w.write_record([
                m.class_name.clone(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.support.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.write_record([
            "macro".to_string(),
            self.macro_precision.to_string(),
            self.macro_recall.to_string(),
            self.macro_f1.to_string(),
            self.total.to_string(),
        ])
        .map_err(csv_io)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn identity_predictions_are_diagonal() {
        let t: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let cm = confusion_matrix(&t, &t, &names(3)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    assert_eq!(cm.counts[r][c], 0);
                }
            }
        }
        assert_eq!(cm.total(), 10);
        let m = metrics(&cm);
        assert_eq!((m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_counted_matrix() {
        let cm = confusion_matrix(&[0, 0, 1, 1], &[0, 1, 1, 1], &names(2)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn empty_inputs_give_zero_matrix() {
        let cm = confusion_matrix(&[], &[], &names(4)).unwrap();
        assert_eq!(cm.counts, vec![vec![0; 4]; 4]);
        assert_eq!(metrics(&cm).accuracy, 0.0);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            confusion_matrix(&[0], &[], &names(2)),
            Err(EvaluationError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion_matrix(&[0], &[2], &names(2)),
            Err(EvaluationError::UnknownLabel { label: 2, .. })
        ));
        assert!(confusion_matrix_by_name(&["c0"], &["c9"], &names(2)).is_err());
    }

    #[test]
    fn two_class_fixture() {
        let cm = ConfusionMatrix {
            class_names: names(2),
            counts: vec![vec![8, 2], vec![1, 9]],
        };
        let m = metrics(&cm);
        assert!((m.accuracy - 0.85).abs() < 1e-12);
        let c0 = &m.per_class[0];
        let c1 = &m.per_class[1];
        assert!((c0.precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((c0.recall - 0.8).abs() < 1e-12);
        assert!((c0.f1 - 16.0 / 19.0).abs() < 1e-12);
        assert!((c1.precision - 9.0 / 11.0).abs() < 1e-12);
        assert!((c1.recall - 0.9).abs() < 1e-12);
        assert!((c1.f1 - 6.0 / 7.0).abs() < 1e-12);
        assert!((m.macro_f1 - 0.8496).abs() < 1e-4);
    }

    #[test]
    fn empty_class_uses_zero_convention() {
        let cm = ConfusionMatrix {
            class_names: names(3),
            counts: vec![vec![3, 1, 0], vec![0, 4, 0], vec![0, 0, 0]],
        };
        let m = metrics(&cm);
        let c2 = &m.per_class[2];
        assert_eq!((c2.precision, c2.recall, c2.f1), (0.0, 0.0, 0.0));
        assert!(c2.precision_undefined && c2.recall_undefined && c2.f1_undefined);
        assert!(!m.per_class[0].precision_undefined);
    }

    fn report_with_f1(f1s: &[f64]) -> MetricsReport {
        MetricsReport {
            accuracy: 0.0,
            macro_precision: 0.0,
            macro_recall: 0.0,
            macro_f1: 0.0,
            total: 0,
            averaging: String::new(),
            per_class: f1s
                .iter()
                .enumerate()
                .map(|(i, &f1)| ClassMetrics {
                    class_name: format!("c{i}"),
                    precision: f1,
                    recall: f1,
                    f1,
                    support: 1,
                    precision_undefined: false,
                    recall_undefined: false,
                    f1_undefined: false,
                })
                .collect(),
        }
    }

    #[test]
    fn flags_below_threshold() {
        let r = report_with_f1(&[0.95, 0.72, 0.81]);
        assert_eq!(per_class_flags(&r, 0.8), vec!["c1"]);
        assert!(per_class_flags(&r, 0.0).is_empty());
        let r = report_with_f1(&[1.0, 0.5, 0.9, 1.0, 0.2]);
        assert_eq!(per_class_flags(&r, 1.0), vec!["c4", "c1", "c2"]);
    }

    #[test]
    fn csv_exports() {
        let cm = ConfusionMatrix {
            class_names: vec!["Sus scrofa".into(), "Rodent".into()],
            counts: vec![vec![8, 2], vec![1, 9]],
        };
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "true\\predicted,Sus scrofa,Rodent\nSus scrofa,8,2\nRodent,1,9\n"
        );
        let mut buf = Vec::new();
        metrics(&cm).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,precision,recall,f1,support\nSus scrofa,"));
        assert!(text.lines().last().unwrap().starts_with("macro,"));
    }
}
