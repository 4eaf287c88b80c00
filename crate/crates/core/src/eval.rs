//! Classification metrics, reports and the modality-ablation table.
//!
//! Precision or recall with a zero denominator is defined as 0.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::BehaviorClass;
use crate::error::{Error, Result};

pub use crate::pipeline::run_ablation;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::InvalidLabel(format!("class {} out of range", t.max(p))));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.n_classes()).map(|t| self.counts[t][c]).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        self.support(c) - self.tp(c)
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n_samples: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        let c = confusion.n_classes();
        if class_names.len() != c {
            return Err(Error::LengthMismatch(class_names.len(), c));
        }
        let total = confusion.total();
        if total == 0 {
            return Err(Error::InvalidArgument("cannot evaluate zero samples".into()));
        }
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let precision = ratio(confusion.tp(k), confusion.tp(k) + confusion.fp(k));
                let recall = ratio(confusion.tp(k), confusion.support(k));
                ClassMetrics {
                    class: class_names[k].clone(),
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    support: confusion.support(k),
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            per_class
                .iter()
                .map(|m| m.support as f64 / total as f64 * f(m))
                .sum::<f64>()
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            n_samples: total,
            accuracy: confusion.trace() as f64 / total as f64,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            weighted_precision: weighted(|m| m.precision),
            weighted_recall: weighted(|m| m.recall),
            weighted_f1: weighted(|m| m.f1),
            per_class,
            confusion,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64());
        if found != Some(REPORT_SCHEMA_VERSION as u64) {
            return Err(Error::SchemaVersionMismatch {
                expected: REPORT_SCHEMA_VERSION,
                found,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for m in &self.per_class {
            let _ = writeln!(out, "{},{:.4},{:.4},{:.4},{}", m.class, m.precision, m.recall, m.f1, m.support);
        }
        out
    }

    /// Per-class rows followed by accuracy, macro and weighted averages.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:>10}{:>10}{:>10}{:>10}",
            "Class", "Precision", "Recall", "F1-score", "Support"
        );
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10}",
                m.class, m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>10.4}{:>10}", "Accuracy", "", "", self.accuracy, self.n_samples);
        let _ = writeln!(
            out,
            "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10}",
            "Macro Avg", self.macro_precision, self.macro_recall, self.macro_f1, self.n_samples
        );
        let _ = writeln!(
            out,
            "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10}",
            "Weighted Avg", self.weighted_precision, self.weighted_recall, self.weighted_f1, self.n_samples
        );
        out
    }
}

/// Report over the four behaviour classes.
pub fn evaluate(y_true: &[usize], y_pred: &[usize]) -> Result<EvalReport> {
    let names: Vec<String> = BehaviorClass::ALL.iter().map(|c| c.name().to_string()).collect();
    evaluate_with(y_true, y_pred, &names)
}

pub fn evaluate_with(y_true: &[usize], y_pred: &[usize], class_names: &[String]) -> Result<EvalReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let cm = ConfusionMatrix::new(y_true, y_pred, class_names.len())?;
    EvalReport::from_confusion(cm, class_names)
}

pub fn macro_f1(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    let names: Vec<String> = (0..n_classes).map(|c| c.to_string()).collect();
    Ok(evaluate_with(y_true, y_pred, &names)?.macro_f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "text" | "txt" => Ok(Self::Text),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => Ok(report.to_csv()),
        ReportFormat::Text => Ok(report.to_text()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub n_features: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mask: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }

    /// `mask,accuracy,macro_f1,gap_vs_full`; the gap is in accuracy.
    pub fn to_csv(&self) -> String {
        let full = self.get("eeg+emg+gsr").map(|r| r.report.accuracy);
        let mut out = String::from("mask,accuracy,macro_f1,gap_vs_full\n");
        for r in &self.rows {
            let gap = full.map_or(String::new(), |f| format!("{:.4}", r.report.accuracy - f));
            let _ = writeln!(out, "{},{:.4},{:.4},{}", r.mask, r.report.accuracy, r.report.macro_f1, gap);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_two_class_fixture() {
        let names = vec!["a".to_string(), "b".to_string()];
        let r = evaluate_with(&[0, 0, 1, 1], &[0, 1, 1, 1], &names).unwrap();
        assert_eq!(r.accuracy, 0.75);
        let (a, b) = (&r.per_class[0], &r.per_class[1]);
        assert_eq!(a.precision, 1.0);
        assert_eq!(a.recall, 0.5);
        assert!((a.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(b.recall, 1.0);
        assert!((b.f1 - 0.8).abs() < 1e-15);
        assert!((r.macro_f1 - 11.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 3, 2];
        let r = evaluate(&y, &y).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn absent_predictions_score_zero() {
        let r = evaluate(&[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(evaluate(&[0, 1], &[0]), Err(Error::LengthMismatch(2, 1))));
    }

    #[test]
    fn four_class_macro_average() {
        let f1s: [f64; 4] = [0.83, 0.79, 0.69, 0.81];
        let m = f1s.iter().sum::<f64>() / 4.0;
        assert!((m - 0.78).abs() < 0.005);
    }

    #[test]
    fn formats() {
        let r = evaluate(&[0, 1, 2, 3, 1], &[0, 1, 2, 2, 1]).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let text = r.to_text();
        assert_eq!(text.lines().count(), 1 + 4 + 3);
        assert!(r.to_csv().starts_with("class,precision,recall,f1,support\n"));
        assert_eq!("TEXT".parse::<ReportFormat>().unwrap(), ReportFormat::Text);
    }
}
