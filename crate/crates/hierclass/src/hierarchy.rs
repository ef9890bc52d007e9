//! The two-step strategy: merge all non-dominant labels into one combined
//! class, separate dominant from combined with a binary stage, then recover
//! the original label inside the combined class with a multiclass stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, sigmoid, softmax, ModelParams};
use crate::sentiment::{Lexicon, SentimentFeatures};
use crate::tokenizer::{TokenSequence, Tokenizer};

/// Partition of the original labels into one dominant label and the
/// ordered list of merged labels. Binary mapping: dominant -> 1, merged
/// -> 0; multiclass mapping: merged label -> its index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    labels: Vec<String>,
    dominant: String,
    merged: Vec<String>,
}

impl LabelSchema {
    /// Dominant = label with the maximum count (ties break to the
    /// lexicographically smallest); merged = all others, lexicographic.
    pub fn build(distribution: &BTreeMap<String, usize>) -> Result<LabelSchema> {
        if distribution.len() < 2 {
            return Err(Error::Data(format!(
                "label schema needs at least 2 distinct labels, got {}",
                distribution.len()
            )));
        }
        // BTreeMap iterates in key order, so max_by_key on the count keeps
        // the lexicographically smallest label among ties.
        let dominant = distribution
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(label, _)| label.clone())
            .expect("non-empty distribution");
        let labels: Vec<String> = distribution.keys().cloned().collect();
        let merged: Vec<String> = labels.iter().filter(|l| **l != dominant).cloned().collect();
        Ok(LabelSchema {
            labels,
            dominant,
            merged,
        })
    }

    /// All original labels, lexicographically ordered.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dominant(&self) -> &str {
        &self.dominant
    }

    /// The merged labels in multiclass-index order.
    pub fn merged(&self) -> &[String] {
        &self.merged
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// 1 for the dominant label, 0 for any merged label.
    pub fn binary_label(&self, label: &str) -> Result<u32> {
        if label == self.dominant {
            Ok(1)
        } else if self.merged.iter().any(|l| l == label) {
            Ok(0)
        } else {
            Err(self.unknown(label))
        }
    }

    /// Multiclass index of a merged label; `None` for the dominant one.
    pub fn merged_index(&self, label: &str) -> Result<Option<usize>> {
        if label == self.dominant {
            return Ok(None);
        }
        match self.merged.iter().position(|l| l == label) {
            Some(idx) => Ok(Some(idx)),
            None => Err(self.unknown(label)),
        }
    }

    fn unknown(&self, label: &str) -> Error {
        Error::UnknownLabel {
            label: label.to_string(),
            known: self.labels.clone(),
        }
    }

    /// Rebuild from the checkpoint manifest fields, revalidating the
    /// partition invariants.
    pub fn from_parts(labels: Vec<String>, dominant: String) -> Result<LabelSchema> {
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() || sorted != labels {
            return Err(Error::Data(
                "schema labels must be distinct and lexicographically ordered".into(),
            ));
        }
        if !labels.contains(&dominant) {
            return Err(Error::Data(format!(
                "dominant label {dominant:?} is not among the schema labels"
            )));
        }
        if labels.len() < 2 {
            return Err(Error::Data("schema needs at least 2 labels".into()));
        }
        let merged = labels.iter().filter(|l| **l != dominant).cloned().collect();
        Ok(LabelSchema {
            labels,
            dominant,
            merged,
        })
    }
}

/// Relabel every record as 1 (dominant) or 0 (merged), preserving order.
pub fn project_binary(dataset: &Dataset, schema: &LabelSchema) -> Result<Vec<(String, u32)>> {
    dataset
        .records()
        .iter()
        .map(|rec| Ok((rec.text.clone(), schema.binary_label(&rec.label)?)))
        .collect()
}

/// Keep only merged-label records, relabeled by multiclass index,
/// preserving order.
pub fn project_multiclass(dataset: &Dataset, schema: &LabelSchema) -> Result<Vec<(String, u32)>> {
    let mut out = Vec::new();
    for rec in dataset.records() {
        if let Some(idx) = schema.merged_index(&rec.label)? {
            out.push((rec.text.clone(), idx as u32));
        }
    }
    Ok(out)
}

/// A trained two-stage classifier. Both stages share the tokenizer and
/// lexicon; stage 2 is absent when only one label was merged.
#[derive(Debug, Clone)]
pub struct HierarchicalModel {
    pub tokenizer: Tokenizer,
    pub lexicon: Lexicon,
    pub schema: LabelSchema,
    pub stage1: ModelParams,
    pub stage2: Option<ModelParams>,
    pub threshold: f64,
}

/// Outcome of one prediction: the final label, the stage-1 probability of
/// the dominant class, and the stage-2 distribution when it was evaluated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub p1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist2: Option<Vec<f64>>,
}

impl HierarchicalModel {
    /// Validate the cross-stage invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.stage1.config.n_classes != 1 {
            return Err(Error::Config(
                "stage 1 must have a single-logit binary head".into(),
            ));
        }
        let m = self.schema.merged().len();
        match &self.stage2 {
            Some(params) if params.config.n_classes != m => Err(Error::Config(format!(
                "stage 2 head width {} does not match {m} merged labels",
                params.config.n_classes
            ))),
            None if m > 1 => Err(Error::Config(format!(
                "stage 2 is required for {m} merged labels"
            ))),
            Some(params) if params.config.max_len != self.stage1.config.max_len => {
                Err(Error::Config("stages disagree on max_len".into()))
            }
            _ => Ok(()),
        }
    }

    /// Tokenize and featurize one text for either stage.
    pub fn encode_input(&self, text: &str) -> (TokenSequence, SentimentFeatures) {
        let seq = self.tokenizer.encode(text, self.stage1.config.max_len);
        let senti = self.lexicon.extract_features(text);
        (seq, senti)
    }

    /// Two-step prediction: the dominant label when `p1 >= threshold`,
    /// otherwise the argmax merged label (stage 2 is only evaluated on
    /// this path, and never when a single label was merged).
    pub fn predict(&self, text: &str) -> Prediction {
        let (seq, senti) = self.encode_input(text);
        let trace = forward(&self.stage1, &seq, &senti);
        let p1 = sigmoid(trace.logits[0]);
        if p1 >= self.threshold {
            return Prediction {
                label: self.schema.dominant().to_string(),
                p1,
                dist2: None,
            };
        }
        match &self.stage2 {
            None => Prediction {
                label: self.schema.merged()[0].clone(),
                p1,
                dist2: None,
            },
            Some(stage2) => {
                let trace2 = forward(stage2, &seq, &senti);
                let dist = softmax(trace2.logits.as_slice().expect("standard layout"));
                let best = argmax(&dist);
                Prediction {
                    label: self.schema.merged()[best].clone(),
                    p1,
                    dist2: Some(dist),
                }
            }
        }
    }

    /// Stage-2 distribution for a text, independent of stage-1 routing.
    /// `None` when the model has no second stage.
    pub fn stage2_distribution(&self, text: &str) -> Option<Vec<f64>> {
        let stage2 = self.stage2.as_ref()?;
        let (seq, senti) = self.encode_input(text);
        let trace = forward(stage2, &seq, &senti);
        Some(softmax(trace.logits.as_slice().expect("standard layout")))
    }
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
