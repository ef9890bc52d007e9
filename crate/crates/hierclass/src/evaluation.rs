//! Confusion matrices, per-class precision/recall/one-vs-rest accuracy and
//! report rendering in a fixed-width `Model | Class | Precision | Recall |
//! Accuracy` table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// k x k counts; rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn count(&self, gold: usize, pred: usize) -> usize {
        self.counts[gold][pred]
    }

    /// Total number of evaluated records.
    pub fn total(&self) -> usize {
        self.counts
            .iter()
            .map(|row| row.iter().sum::<usize>())
            .sum()
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }
}

/// Tally gold/predicted label pairs into a confusion matrix.
pub fn confusion(
    preds: &[String],
    golds: &[String],
    classes: &[String],
) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "prediction count {} does not match gold count {}",
            preds.len(),
            golds.len()
        )));
    }
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    if index.len() != classes.len() {
        return Err(Error::Data(
            "confusion matrix classes must be distinct".into(),
        ));
    }
    let unknown = |label: &str| Error::UnknownLabel {
        label: label.to_string(),
        known: classes.to_vec(),
    };
    let mut counts = vec![vec![0usize; classes.len()]; classes.len()];
    for (pred, gold) in preds.iter().zip(golds) {
        let gi = *index.get(gold.as_str()).ok_or_else(|| unknown(gold))?;
        let pi = *index.get(pred.as_str()).ok_or_else(|| unknown(pred))?;
        counts[gi][pi] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

/// Per-class metrics; 0/0 ratios are defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    /// One-vs-rest accuracy: (TP + TN) / n for this class.
    pub ovr_accuracy: f64,
}

/// Full report for one evaluation: per-class metrics in class order plus
/// the overall and macro figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_order: Vec<String>,
    pub classes: BTreeMap<String, ClassMetrics>,
    pub overall_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

impl EvalReport {
    pub fn metrics(&self, class: &str) -> Option<&ClassMetrics> {
        self.classes.get(class)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and one-vs-rest accuracy per class, overall accuracy
/// and macro averages, all from the confusion matrix alone.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> EvalReport {
    let k = cm.size();
    let n = cm.total();
    let mut classes = BTreeMap::new();
    let mut macro_precision = 0.0;
    let mut macro_recall = 0.0;
    let mut trace = 0;
    for c in 0..k {
        let tp = cm.count(c, c);
        trace += tp;
        let predicted: usize = (0..k).map(|g| cm.count(g, c)).sum();
        let gold: usize = (0..k).map(|p| cm.count(c, p)).sum();
        let fp = predicted - tp;
        let fne = gold - tp;
        let tn = n - tp - fp - fne;
        let metrics = ClassMetrics {
            precision: ratio(tp, predicted),
            recall: ratio(tp, gold),
            ovr_accuracy: ratio(tp + tn, n),
        };
        macro_precision += metrics.precision;
        macro_recall += metrics.recall;
        classes.insert(cm.classes()[c].clone(), metrics);
    }
    EvalReport {
        class_order: cm.classes().to_vec(),
        classes,
        overall_accuracy: ratio(trace, n),
        macro_precision: if k == 0 {
            0.0
        } else {
            macro_precision / k as f64
        },
        macro_recall: if k == 0 { 0.0 } else { macro_recall / k as f64 },
    }
}

/// Metrics document written next to the report: stage name -> report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub model: String,
    pub stages: BTreeMap<String, EvalReport>,
}

/// Render one fixed-width table per stage with columns `Model | Class |
/// Precision | Recall | Accuracy`; probabilities use 2 decimals and the
/// one-vs-rest accuracy renders as an integer percent.
pub fn render_report(stages: &[(String, EvalReport)], model_name: &str) -> String {
    let mut out = String::new();
    for (stage, report) in stages {
        out.push_str(&format!("== {stage} ==\n"));
        let mut rows: Vec<[String; 5]> = vec![[
            "Model".into(),
            "Class".into(),
            "Precision".into(),
            "Recall".into(),
            "Accuracy".into(),
        ]];
        for class in &report.class_order {
            let m = report.classes[class];
            rows.push([
                model_name.to_string(),
                class.clone(),
                format!("{:.2}", m.precision),
                format!("{:.2}", m.recall),
                format!("{:.0}%", m.ovr_accuracy * 100.0),
            ]);
        }
        let mut widths = [0usize; 5];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join(" | ").trim_end());
            out.push('\n');
        }
        out.push_str(&format!(
            "overall accuracy {:.4}, macro precision {:.4}, macro recall {:.4}\n\n",
            report.overall_accuracy, report.macro_precision, report.macro_recall
        ));
    }
    out
}
