//! Library-level command implementations. The binary in `main.rs` is a
//! thin argument parser over these, so every CLI result can be reproduced
//! by a direct library call.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{class_distribution, load_dataset, DataFormat, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, per_class_metrics, render_report, EvalReport, MetricsDoc};
use crate::hierarchy::{argmax, HierarchicalModel, LabelSchema, Prediction};
use crate::model::ModelConfig;
use crate::sentiment::{load_lexicon, SENTIMENT_DIM};
use crate::tokenizer::{Tokenizer, MIN_VOCAB_SIZE};
use crate::training::{
    load_checkpoint, save_checkpoint, train_hierarchical, write_all_curves, TrainConfig,
    TrainHistory,
};

/// Name used in the `Model` column of rendered reports.
pub const MODEL_NAME: &str = "hierclass";

/// Class name of the merged side in binary-stage reports.
pub const COMBINED_CLASS: &str = "combined";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub dataset: PathBuf,
    /// `csv` or `jsonl`; inferred from the extension when omitted.
    pub format: Option<String>,
    pub lexicon: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: PathBuf::new(),
            format: None,
            lexicon: PathBuf::new(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            vocab_size: 1000,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchySection {
    pub threshold: f64,
}

impl Default for HierarchySection {
    fn default() -> Self {
        HierarchySection { threshold: 0.5 }
    }
}

/// The single structured config document consumed by every command,
/// nested by module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub hierarchy: HierarchySection,
}

impl RunConfig {
    /// Model config shared by both stages; `n_classes` is set per stage.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len: self.tokenizer.max_len,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_layers: self.model.n_layers,
            d_ff: self.model.d_ff,
            sentiment_dim: SENTIMENT_DIM,
            n_classes: 1,
            seed: self.model.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.dataset.as_os_str().is_empty() {
            return Err(Error::Config("data.dataset is required".into()));
        }
        if self.data.lexicon.as_os_str().is_empty() {
            return Err(Error::Config("data.lexicon is required".into()));
        }
        if !self.data.dataset.exists() {
            return Err(Error::Config(format!(
                "dataset {} does not exist",
                self.data.dataset.display()
            )));
        }
        if !self.data.lexicon.exists() {
            return Err(Error::Config(format!(
                "lexicon {} does not exist",
                self.data.lexicon.display()
            )));
        }
        if let Some(format) = &self.data.format {
            format.parse::<DataFormat>()?;
        }
        if self.tokenizer.vocab_size < MIN_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "tokenizer.vocab_size must be at least {MIN_VOCAB_SIZE}"
            )));
        }
        // Placeholder vocab size; only the encoder dimensions matter here.
        self.model_config(MIN_VOCAB_SIZE).validate()?;
        self.train.validate()?;
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config(
                "split.test_fraction must be in (0, 1)".into(),
            ));
        }
        if !(self.hierarchy.threshold > 0.0 && self.hierarchy.threshold < 1.0) {
            return Err(Error::Config(
                "hierarchy.threshold must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn data_format(&self) -> Result<DataFormat> {
        match &self.data.format {
            Some(f) => f.parse(),
            None => DataFormat::from_path(&self.data.dataset),
        }
    }

    fn load_dataset(&self) -> Result<Dataset> {
        load_dataset(&self.data.dataset, self.data_format()?)
    }
}

/// Parse a config file, rejecting malformed documents as config errors.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Train the tokenizer on every dataset text and serialize it into the
/// output directory. Returns the directory holding vocab.json/merges.txt.
pub fn cmd_tokenizer_train(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let lines: Vec<&str> = dataset.records().iter().map(|r| r.text.as_str()).collect();
    let tokenizer = Tokenizer::train(&lines, config.tokenizer.vocab_size)?;
    tokenizer.save(&config.data.output_dir)?;
    Ok(config.data.output_dir.clone())
}

/// Everything `train` produced, for callers that want to inspect it.
#[derive(Debug)]
pub struct TrainOutputs {
    pub checkpoint_dir: PathBuf,
    pub history1: TrainHistory,
    pub history2: Option<TrainHistory>,
    pub schema: LabelSchema,
}

/// Build the schema, split the data, train both stages, save the
/// checkpoint under `<output_dir>/checkpoint` and write the curves CSVs
/// into the output directory.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutputs> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let lexicon = load_lexicon(&config.data.lexicon)?;
    let out = &config.data.output_dir;

    // Reuse a previously trained tokenizer when one is present.
    let tokenizer = if out.join("vocab.json").exists() && out.join("merges.txt").exists() {
        Tokenizer::load(out)?
    } else {
        let lines: Vec<&str> = dataset.records().iter().map(|r| r.text.as_str()).collect();
        let tokenizer = Tokenizer::train(&lines, config.tokenizer.vocab_size)?;
        tokenizer.save(out)?;
        tokenizer
    };

    let schema = LabelSchema::build(&class_distribution(&dataset))?;
    let base = config.model_config(tokenizer.vocab_size());
    let (model, history1, history2) = train_hierarchical(
        &dataset,
        &schema,
        tokenizer,
        lexicon,
        &base,
        &config.train,
        config.split.test_fraction,
        config.hierarchy.threshold,
    )?;

    let checkpoint_dir = out.join("checkpoint");
    save_checkpoint(&model, &checkpoint_dir, config.train.seed)?;
    write_all_curves(out, &history1, history2.as_ref())?;
    Ok(TrainOutputs {
        checkpoint_dir,
        history1,
        history2,
        schema,
    })
}

/// Per-stage evaluation of a model over a dataset: the binary stage on the
/// binary-projected gold labels, the multiclass stage on the merged-label
/// subset (independent of stage-1 routing), and the full pipeline over all
/// original labels.
pub fn evaluate_model(
    model: &HierarchicalModel,
    dataset: &Dataset,
) -> Result<Vec<(String, EvalReport)>> {
    let schema = &model.schema;
    for rec in dataset.records() {
        if !schema.contains(&rec.label) {
            return Err(Error::UnknownLabel {
                label: rec.label.clone(),
                known: schema.labels().to_vec(),
            });
        }
    }

    let mut stages = Vec::new();
    let predictions: Vec<Prediction> = dataset
        .records()
        .iter()
        .map(|r| model.predict(&r.text))
        .collect();

    // Stage 1: dominant vs combined. A prediction routed to the dominant
    // side is exactly one with p1 at or above the threshold.
    let binary_classes = vec![COMBINED_CLASS.to_string(), schema.dominant().to_string()];
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    for (rec, prediction) in dataset.records().iter().zip(&predictions) {
        let gold_is_dominant = schema.binary_label(&rec.label)? == 1;
        golds.push(binary_classes[usize::from(gold_is_dominant)].clone());
        let pred_is_dominant = prediction.p1 >= model.threshold;
        preds.push(binary_classes[usize::from(pred_is_dominant)].clone());
    }
    stages.push((
        "binary".to_string(),
        per_class_metrics(&confusion(&preds, &golds, &binary_classes)?),
    ));

    // Stage 2 in isolation over the merged-label subset.
    if model.stage2.is_some() {
        let mut golds = Vec::new();
        let mut preds = Vec::new();
        for rec in dataset.records() {
            if schema.merged_index(&rec.label)?.is_some() {
                golds.push(rec.label.clone());
                let dist = model
                    .stage2_distribution(&rec.text)
                    .expect("stage 2 present");
                preds.push(schema.merged()[argmax(&dist)].clone());
            }
        }
        stages.push((
            "multiclass".to_string(),
            per_class_metrics(&confusion(&preds, &golds, schema.merged())?),
        ));
    }

    // Full pipeline over the original label set.
    let golds: Vec<String> = dataset.records().iter().map(|r| r.label.clone()).collect();
    let preds: Vec<String> = predictions.into_iter().map(|p| p.label).collect();
    stages.push((
        "end_to_end".to_string(),
        per_class_metrics(&confusion(&preds, &golds, schema.labels())?),
    ));
    Ok(stages)
}

/// Load a checkpoint, evaluate it over a dataset, render the text report
/// and write the metrics file.
pub fn cmd_evaluate(
    checkpoint: &Path,
    data: &Path,
    format: Option<DataFormat>,
    metrics_out: &Path,
) -> Result<(String, MetricsDoc)> {
    let model = load_checkpoint(checkpoint)?;
    let format = match format {
        Some(f) => f,
        None => DataFormat::from_path(data)?,
    };
    let dataset = load_dataset(data, format)?;
    let stages = evaluate_model(&model, &dataset)?;
    let table = render_report(&stages, MODEL_NAME);
    let doc = MetricsDoc {
        model: MODEL_NAME.to_string(),
        stages: stages.into_iter().collect(),
    };
    let json = serde_json::to_string_pretty(&doc).expect("metrics serialization cannot fail");
    std::fs::write(metrics_out, json).map_err(|e| Error::io(metrics_out, e))?;
    Ok((table, doc))
}

/// Load a checkpoint and classify one text.
pub fn cmd_predict(checkpoint: &Path, text: &str) -> Result<Prediction> {
    let model = load_checkpoint(checkpoint)?;
    Ok(model.predict(text))
}
