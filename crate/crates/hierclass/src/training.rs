//! Adam optimization over mini-batches, accuracy curves, finite-difference
//! gradient verification and checkpoint persistence.
//!
//! All randomness (splits, shuffles, init) flows through seeded ChaCha8
//! generators, so identical configs reproduce identical runs bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::hierarchy::{
    argmax, project_binary, project_multiclass, HierarchicalModel, LabelSchema,
};
use crate::model::{
    batch_loss, forward, forward_backward, sigmoid, synth, Example, HeadKind, ModelConfig,
    ModelParams,
};
use crate::sentiment::{load_lexicon, Lexicon};
use crate::tokenizer::Tokenizer;

/// Name of the seeded generator recorded in checkpoint manifests.
pub const GENERATOR_NAME: &str = "chacha8";

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without test-accuracy improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 30,
            seed: 42,
            early_stop_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Losses and accuracies of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Per-epoch record of one stage's training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_test_acc(&self) -> f64 {
        self.epochs[self.best_epoch - 1].test_acc
    }
}

/// First and second Adam moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> AdamState {
        AdamState {
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
        }
    }
}

/// One bias-corrected Adam update, elementwise over every tensor.
/// `t` is the 1-based step index.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    t: usize,
    cfg: &TrainConfig,
) {
    assert!(t >= 1, "Adam step index is 1-based");
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let grads = grads.tensors();
    let mut p_slices = params.tensors_mut();
    let mut m_slices = state.m.tensors_mut();
    let mut v_slices = state.v.tensors_mut();
    assert_eq!(p_slices.len(), grads.len(), "gradient shape mismatch");
    for i in 0..p_slices.len() {
        let g = grads[i].1;
        let p = &mut p_slices[i];
        let m = &mut m_slices[i];
        let v = &mut v_slices[i];
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Fraction of examples whose head prediction matches the label.
pub fn accuracy(params: &ModelParams, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let kind = params.head_kind();
    let mut correct = 0usize;
    for ex in examples {
        let trace = forward(params, &ex.seq, &ex.senti);
        let predicted = match kind {
            HeadKind::Binary => u32::from(sigmoid(trace.logits[0]) >= 0.5),
            HeadKind::Multiclass => {
                argmax(trace.logits.as_slice().expect("standard layout")) as u32
            }
        };
        if predicted == ex.label {
            correct += 1;
        }
    }
    correct as f64 / examples.len() as f64
}

/// Train one stage: per epoch, shuffle with the seeded generator, walk
/// mini-batches through `forward_backward` and `adam_step`, then record the
/// mean train loss and both accuracies. Stops early once the test accuracy
/// has not improved for more than `early_stop_patience` epochs and returns
/// the parameters of the best-test-accuracy epoch, rounded to f32 values
/// so checkpoints reproduce them exactly.
pub fn train_stage(
    init: ModelParams,
    train: &[Example],
    test: &[Example],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("training set is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::Train("test set is empty".into()));
    }
    let kind = init.head_kind();
    let mut params = init;
    let mut state = AdamState::new(&params.config);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;

    let mut history = Vec::new();
    let mut best_params: Option<ModelParams> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = forward_backward(&params, &batch, kind);
            step += 1;
            adam_step(&mut params, &grads, &mut state, step, cfg);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_acc = accuracy(&params, train);
        let test_acc = accuracy(&params, test);
        history.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            test_acc,
        });

        if test_acc > best_acc {
            best_acc = test_acc;
            best_epoch = epoch;
            best_params = Some(params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best > cfg.early_stop_patience {
                break;
            }
        }
    }

    let mut best = best_params.expect("at least one epoch ran");
    best.round_to_f32();
    Ok((
        best,
        TrainHistory {
            epochs: history,
            best_epoch,
        },
    ))
}

/// Encode projected (text, label) pairs into model inputs.
pub fn build_examples(
    pairs: &[(String, u32)],
    tokenizer: &Tokenizer,
    lexicon: &Lexicon,
    max_len: usize,
) -> Vec<Example> {
    pairs
        .iter()
        .map(|(text, label)| Example {
            seq: tokenizer.encode(text, max_len),
            senti: lexicon.extract_features(text),
            label: *label,
        })
        .collect()
}

/// Split the dataset, train stage 1 on the binary projection and stage 2
/// on the merged-label subset (skipped when only one label was merged),
/// and assemble the hierarchical model. Stage 2 derives its init and
/// shuffle seeds from the stage-1 seeds plus one.
#[allow(clippy::too_many_arguments)]
pub fn train_hierarchical(
    dataset: &Dataset,
    schema: &LabelSchema,
    tokenizer: Tokenizer,
    lexicon: Lexicon,
    base_config: &ModelConfig,
    cfg: &TrainConfig,
    test_fraction: f64,
    threshold: f64,
) -> Result<(HierarchicalModel, TrainHistory, Option<TrainHistory>)> {
    if base_config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match tokenizer vocabulary of {}",
            base_config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let (train_ds, test_ds) = stratified_split(dataset, test_fraction, cfg.seed)?;

    let config1 = ModelConfig {
        n_classes: 1,
        ..base_config.clone()
    };
    let train1 = build_examples(
        &project_binary(&train_ds, schema)?,
        &tokenizer,
        &lexicon,
        config1.max_len,
    );
    let test1 = build_examples(
        &project_binary(&test_ds, schema)?,
        &tokenizer,
        &lexicon,
        config1.max_len,
    );
    let (stage1, history1) = train_stage(ModelParams::init(&config1)?, &train1, &test1, cfg)?;

    let m = schema.merged().len();
    let (stage2, history2) = if m >= 2 {
        let config2 = ModelConfig {
            n_classes: m,
            seed: base_config.seed.wrapping_add(1),
            ..base_config.clone()
        };
        let cfg2 = TrainConfig {
            seed: cfg.seed.wrapping_add(1),
            ..cfg.clone()
        };
        let train2 = build_examples(
            &project_multiclass(&train_ds, schema)?,
            &tokenizer,
            &lexicon,
            config2.max_len,
        );
        let test2 = build_examples(
            &project_multiclass(&test_ds, schema)?,
            &tokenizer,
            &lexicon,
            config2.max_len,
        );
        let (params, history) = train_stage(ModelParams::init(&config2)?, &train2, &test2, &cfg2)?;
        (Some(params), Some(history))
    } else {
        (None, None)
    };

    let model = HierarchicalModel {
        tokenizer,
        lexicon,
        schema: schema.clone(),
        stage1,
        stage2,
        threshold,
    };
    model.validate()?;
    Ok((model, history1, history2))
}

/// Compare analytic gradients of a randomly initialized model against
/// central finite differences over every parameter and return the largest
/// relative error. Runs entirely in f64; panics on an invalid config.
pub fn gradient_check(config: &ModelConfig, seed: u64, batch_size: usize, h: f64) -> f64 {
    let params = ModelParams::init(config).expect("valid model config");
    let kind = params.head_kind();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<Example> = (0..batch_size)
        .map(|_| synth::random_example(&mut rng, config))
        .collect();

    let (_, grads) = forward_backward(&params, &batch, kind);
    let analytic = grads.tensors();

    let mut work = params.clone();
    let n_tensors = analytic.len();
    let mut max_rel = 0.0f64;
    for ti in 0..n_tensors {
        for i in 0..analytic[ti].1.len() {
            let original = {
                let slices = work.tensors_mut();
                slices[ti][i]
            };
            {
                let mut slices = work.tensors_mut();
                slices[ti][i] = original + h;
            }
            let loss_plus = batch_loss(&work, &batch, kind);
            {
                let mut slices = work.tensors_mut();
                slices[ti][i] = original - h;
            }
            let loss_minus = batch_loss(&work, &batch, kind);
            {
                let mut slices = work.tensors_mut();
                slices[ti][i] = original;
            }
            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let a = analytic[ti].1[i];
            // The denominator floor keeps vanishing gradients comparable:
            // the central difference itself carries ~ulp(loss)/2h of
            // rounding noise, which would dominate a raw ratio there.
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

/// Write a history as CSV with header `epoch,train_loss,train_acc,test_acc`.
pub fn write_curves(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,train_acc,test_acc\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.train_acc, e.test_acc
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageManifest {
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    generator: String,
    threshold: f64,
    labels: Vec<String>,
    dominant: String,
    train_seed: u64,
    stage1: StageManifest,
    stage2: Option<StageManifest>,
    weights_sha256: String,
}

fn stage_manifest(params: &ModelParams, offset: &mut u64) -> StageManifest {
    let mut tensors = Vec::new();
    for (name, data, shape) in params.tensors() {
        tensors.push(TensorInfo {
            name,
            shape,
            offset: *offset,
        });
        *offset += (data.len() * 4) as u64;
    }
    StageManifest {
        config: params.config.clone(),
        tensors,
    }
}

fn append_weights(params: &ModelParams, bytes: &mut Vec<u8>) {
    for (_, data, _) in params.tensors() {
        for &x in data {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

/// Persist a hierarchical model as `manifest.json`, `weights.bin`
/// (little-endian f32 in manifest order), `vocab.json`, `merges.txt`
/// and `lexicon.tsv`.
pub fn save_checkpoint(model: &HierarchicalModel, dir: &Path, train_seed: u64) -> Result<()> {
    model.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.tokenizer.save(dir)?;
    model.lexicon.save(&dir.join("lexicon.tsv"))?;

    let mut bytes = Vec::new();
    let mut offset = 0u64;
    let stage1 = stage_manifest(&model.stage1, &mut offset);
    append_weights(&model.stage1, &mut bytes);
    let stage2 = model.stage2.as_ref().map(|params| {
        let manifest = stage_manifest(params, &mut offset);
        append_weights(params, &mut bytes);
        manifest
    });

    let digest = Sha256::digest(&bytes);
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        generator: GENERATOR_NAME.to_string(),
        threshold: model.threshold,
        labels: model.schema.labels().to_vec(),
        dominant: model.schema.dominant().to_string(),
        train_seed,
        stage1,
        stage2,
        weights_sha256: hex::encode(digest),
    };
    let weights_path = dir.join("weights.bin");
    std::fs::write(&weights_path, &bytes).map_err(|e| Error::io(&weights_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

fn read_stage(manifest: &StageManifest, bytes: &[u8]) -> Result<ModelParams> {
    manifest.config.validate()?;
    let mut params = ModelParams::zeros(&manifest.config);
    let expected: Vec<(String, Vec<usize>, usize)> = params
        .tensors()
        .iter()
        .map(|(name, data, shape)| (name.clone(), shape.clone(), data.len()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut slices = params.tensors_mut();
    for (i, info) in manifest.tensors.iter().enumerate() {
        let (name, shape, len) = &expected[i];
        if info.name != *name {
            return Err(Error::Checkpoint(format!(
                "tensor {} expected name {name}, manifest has {}",
                i, info.name
            )));
        }
        if info.shape != *shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} expected shape {shape:?}, manifest has {:?}",
                info.shape
            )));
        }
        let start = info.offset as usize;
        let end = start + len * 4;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} extends past the end of weights.bin"
            )));
        }
        let slice = &mut slices[i];
        for (j, chunk) in bytes[start..end].chunks_exact(4).enumerate() {
            let value = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !value.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} contains a non-finite value"
                )));
            }
            slice[j] = value as f64;
        }
    }
    Ok(params)
}

/// Load a checkpoint directory, verifying the format version, the weight
/// checksum and every tensor's name and shape before accepting it.
pub fn load_checkpoint(dir: &Path) -> Result<HierarchicalModel> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("invalid manifest.json: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.generator != GENERATOR_NAME {
        return Err(Error::Checkpoint(format!(
            "unsupported generator {:?}",
            manifest.generator
        )));
    }

    let weights_path = dir.join("weights.bin");
    let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.weights_sha256 {
        return Err(Error::Checkpoint(format!(
            "weights.bin checksum mismatch: expected {}, found {digest}",
            manifest.weights_sha256
        )));
    }
    let total: usize = std::iter::once(&manifest.stage1)
        .chain(manifest.stage2.iter())
        .flat_map(|s| s.tensors.iter())
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if total != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "weights.bin has {} bytes, manifest describes {total}",
            bytes.len()
        )));
    }

    let stage1 = read_stage(&manifest.stage1, &bytes)?;
    let stage2 = manifest
        .stage2
        .as_ref()
        .map(|m| read_stage(m, &bytes))
        .transpose()?;

    let schema = LabelSchema::from_parts(manifest.labels, manifest.dominant)?;
    let tokenizer = Tokenizer::load(dir)?;
    let lexicon = load_lexicon(&dir.join("lexicon.tsv"))?;
    let model = HierarchicalModel {
        tokenizer,
        lexicon,
        schema,
        stage1,
        stage2,
        threshold: manifest.threshold,
    };
    model.validate()?;
    Ok(model)
}

/// Metrics for the curves written by the CLI; stage 2 may be absent.
pub fn write_all_curves(
    dir: &Path,
    history1: &TrainHistory,
    history2: Option<&TrainHistory>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_curves(history1, &dir.join("curves_stage1.csv"))?;
    if let Some(history2) = history2 {
        write_curves(history2, &dir.join("curves_stage2.csv"))?;
    }
    Ok(())
}

/// Balanced synthetic (text, label) pairs keyed by marker words; used by
/// loss-sanity checks and tests.
pub fn keyword_pairs(markers: &[&str], per_class: usize) -> Vec<(String, u32)> {
    let fillers = ["the", "a", "note", "line", "item", "entry"];
    let mut pairs = Vec::new();
    for (c, marker) in markers.iter().enumerate() {
        for i in 0..per_class {
            let filler = fillers[i % fillers.len()];
            pairs.push((format!("{filler} {marker} {}", i % 7), c as u32));
        }
    }
    pairs
}

/// Balanced (text, label) pairs whose texts carry no label signal, so the
/// mean loss of a k-class head cannot drop below ln k.
pub fn balanced_noise_pairs(n_classes: usize, per_class: usize) -> Vec<(String, u32)> {
    let fillers = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta"];
    let mut pairs = Vec::new();
    for c in 0..n_classes {
        for i in 0..per_class {
            let a = fillers[i % fillers.len()];
            let b = fillers[(i / fillers.len()) % fillers.len()];
            pairs.push((format!("{a} {b} {}", i % 5), c as u32));
        }
    }
    pairs
}

/// Keyword examples mapped through a fresh tokenizer and an empty lexicon.
pub fn keyword_examples(
    markers: &[&str],
    per_class: usize,
    max_len: usize,
) -> (Tokenizer, Vec<Example>) {
    let pairs = keyword_pairs(markers, per_class);
    let lines: Vec<String> = pairs.iter().map(|(t, _)| t.clone()).collect();
    let tokenizer = Tokenizer::train(&lines, 300).expect("non-empty corpus");
    let lexicon = Lexicon::from_entries(Vec::new()).expect("empty lexicon is valid");
    let examples = build_examples(&pairs, &tokenizer, &lexicon, max_len);
    (tokenizer, examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::tiny_config;
    use crate::sentiment::SENTIMENT_DIM;

    fn small_train_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 5e-3,
            batch_size: 8,
            epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    fn keyword_model_config(tokenizer: &Tokenizer, n_classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            max_len: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            sentiment_dim: SENTIMENT_DIM,
            n_classes,
            seed,
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let config = tiny_config(1, 40);
        let mut params = ModelParams::init(&config).unwrap();
        let reference = params.clone();
        let grads = ModelParams::zeros(&config);
        let mut state = AdamState::new(&config);
        let cfg = TrainConfig::default();
        for t in 1..=3 {
            adam_step(&mut params, &grads, &mut state, t, &cfg);
        }
        assert_eq!(params, reference);
        assert!(state
            .m
            .tensors()
            .iter()
            .all(|(_, d, _)| d.iter().all(|&x| x == 0.0)));
        assert!(state
            .v
            .tensors()
            .iter()
            .all(|(_, d, _)| d.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn adam_first_step_magnitude_is_bias_corrected_lr() {
        // t = 1, g = 1: m_hat = 1, v_hat = 1, so the update is
        // lr / (1 + adam_eps) exactly.
        let config = tiny_config(1, 41);
        let mut params = ModelParams::init(&config).unwrap();
        let before = params.head_b[0];
        let mut grads = ModelParams::zeros(&config);
        grads.head_b[0] = 1.0;
        let mut state = AdamState::new(&config);
        let cfg = TrainConfig::default();
        adam_step(&mut params, &grads, &mut state, 1, &cfg);
        let expected = cfg.learning_rate / (1.0 + cfg.adam_eps);
        assert!((before - params.head_b[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn training_runs_are_bit_identical() {
        let (tokenizer, examples) = keyword_examples(&["good", "bad"], 12, 16);
        let config = keyword_model_config(&tokenizer, 1, 7);
        let cfg = small_train_config(3, 11);
        let init = ModelParams::init(&config).unwrap();
        let (p1, h1) = train_stage(init.clone(), &examples, &examples, &cfg).unwrap();
        let (p2, h2) = train_stage(init, &examples, &examples, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn single_epoch_history_has_one_entry() {
        let (tokenizer, examples) = keyword_examples(&["aa", "bb"], 6, 16);
        let config = keyword_model_config(&tokenizer, 1, 3);
        let cfg = small_train_config(1, 5);
        let (_, history) = train_stage(
            ModelParams::init(&config).unwrap(),
            &examples,
            &examples,
            &cfg,
        )
        .unwrap();
        assert_eq!(history.epochs.len(), 1);
        assert_eq!(history.best_epoch, 1);
    }

    #[test]
    fn plateaued_accuracy_halts_within_patience() {
        let (tokenizer, examples) = keyword_examples(&["xx", "yy"], 6, 16);
        let config = keyword_model_config(&tokenizer, 1, 4);
        // A learning rate this small cannot flip any prediction, so the
        // test accuracy plateaus immediately.
        let cfg = TrainConfig {
            learning_rate: 1e-12,
            batch_size: 4,
            epochs: 50,
            seed: 6,
            early_stop_patience: 2,
            ..TrainConfig::default()
        };
        let (_, history) = train_stage(
            ModelParams::init(&config).unwrap(),
            &examples,
            &examples,
            &cfg,
        )
        .unwrap();
        assert!(history.epochs.len() <= history.best_epoch + 3);
        assert!(history.epochs.len() < 50);
    }

    #[test]
    fn returned_params_match_best_recorded_epoch() {
        let (tokenizer, examples) = keyword_examples(&["left", "right"], 10, 16);
        let config = keyword_model_config(&tokenizer, 1, 8);
        let cfg = small_train_config(6, 19);
        let (params, history) = train_stage(
            ModelParams::init(&config).unwrap(),
            &examples,
            &examples,
            &cfg,
        )
        .unwrap();
        let best = history
            .epochs
            .iter()
            .map(|e| e.test_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(history.best_test_acc(), best);
        assert!(accuracy(&params, &examples) >= best - 1e-12);
    }

    #[test]
    fn epoch_one_loss_is_near_ln2_for_binary() {
        // Balanced labels with no text signal: ln 2 is the loss floor and
        // the epoch-1 mean settles just above it.
        let pairs = balanced_noise_pairs(2, 128);
        let lines: Vec<String> = pairs.iter().map(|(t, _)| t.clone()).collect();
        let tokenizer = Tokenizer::train(&lines, 300).unwrap();
        let lexicon = Lexicon::from_entries(Vec::new()).unwrap();
        let examples = build_examples(&pairs, &tokenizer, &lexicon, 16);
        let config = keyword_model_config(&tokenizer, 1, 9);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 10,
            ..TrainConfig::default()
        };
        let (_, history) = train_stage(
            ModelParams::init(&config).unwrap(),
            &examples,
            &examples,
            &cfg,
        )
        .unwrap();
        let ln2 = 2.0f64.ln();
        let loss = history.epochs[0].train_loss;
        assert!(
            (loss - ln2).abs() <= 0.2 * ln2,
            "epoch-1 loss {loss} not within 20% of ln 2"
        );
    }

    #[test]
    fn gradient_check_binary_head() {
        let err = gradient_check(&tiny_config(1, 101), 201, 2, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_check_multiclass_head() {
        let err = gradient_check(&tiny_config(3, 102), 202, 2, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn toy_labeled_dataset() -> Dataset {
        use crate::corpus::Record;
        let markers = [
            ("big", "huge", 24usize),
            ("small1", "tiny", 12),
            ("small2", "mini", 12),
        ];
        let mut records = Vec::new();
        for (label, marker, count) in markers {
            for i in 0..count {
                records.push(Record {
                    text: format!("entry {marker} {marker} {}", i % 5),
                    label: label.to_string(),
                });
            }
        }
        Dataset::from_records(records).unwrap()
    }

    fn trained_toy_model() -> (HierarchicalModel, TrainHistory, Option<TrainHistory>) {
        let ds = toy_labeled_dataset();
        let schema = LabelSchema::build(&crate::corpus::class_distribution(&ds)).unwrap();
        let lines: Vec<String> = ds.records().iter().map(|r| r.text.clone()).collect();
        let tokenizer = Tokenizer::train(&lines, 300).unwrap();
        let lexicon = Lexicon::from_entries(Vec::new()).unwrap();
        let base = ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            max_len: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            sentiment_dim: SENTIMENT_DIM,
            n_classes: 1,
            seed: 12,
        };
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 8,
            epochs: 25,
            seed: 13,
            ..TrainConfig::default()
        };
        train_hierarchical(&ds, &schema, tokenizer, lexicon, &base, &cfg, 0.25, 0.5).unwrap()
    }

    #[test]
    fn hierarchical_training_learns_separable_data() {
        let (model, history1, history2) = trained_toy_model();
        assert!(history2.is_some(), "two merged labels need a second stage");
        assert!(history1.best_test_acc() >= 0.9);
        // Every training text must be recovered by the full pipeline.
        let ds = toy_labeled_dataset();
        let mut correct = 0;
        for rec in ds.records() {
            if model.predict(&rec.text).label == rec.label {
                correct += 1;
            }
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.9);
    }

    #[test]
    fn degenerate_merge_skips_stage_two() {
        use crate::corpus::Record;
        let mut records = Vec::new();
        for (label, marker, count) in [("big", "huge", 16usize), ("other", "tiny", 8)] {
            for i in 0..count {
                records.push(Record {
                    text: format!("entry {marker} {}", i % 5),
                    label: label.to_string(),
                });
            }
        }
        let ds = Dataset::from_records(records).unwrap();
        let schema = LabelSchema::build(&crate::corpus::class_distribution(&ds)).unwrap();
        let lines: Vec<String> = ds.records().iter().map(|r| r.text.clone()).collect();
        let tokenizer = Tokenizer::train(&lines, 300).unwrap();
        let lexicon = Lexicon::from_entries(Vec::new()).unwrap();
        let base = ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            max_len: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            sentiment_dim: SENTIMENT_DIM,
            n_classes: 1,
            seed: 3,
        };
        let cfg = small_train_config(5, 4);
        let (model, _, history2) =
            train_hierarchical(&ds, &schema, tokenizer, lexicon, &base, &cfg, 0.25, 0.5).unwrap();
        assert!(model.stage2.is_none());
        assert!(history2.is_none());
        let pred = model.predict("entry tiny 0");
        assert!(model.schema.contains(&pred.label));
        assert!(pred.dist2.is_none());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_predictions_exactly() {
        let (model, _, _) = trained_toy_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 13).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();

        assert_eq!(loaded.schema, model.schema);
        assert_eq!(loaded.threshold, model.threshold);
        for text in [
            "entry huge huge 1",
            "entry tiny tiny 2",
            "entry mini mini 3",
            "",
            "completely unrelated words",
        ] {
            let a = model.predict(text);
            let b = loaded.predict(text);
            assert_eq!(a.label, b.label);
            assert_eq!(a.p1.to_bits(), b.p1.to_bits(), "p1 differs for {text:?}");
            match (a.dist2, b.dist2) {
                (None, None) => {}
                (Some(x), Some(y)) => {
                    assert_eq!(x.len(), y.len());
                    for (u, v) in x.iter().zip(&y) {
                        assert_eq!(u.to_bits(), v.to_bits());
                    }
                }
                other => panic!("stage-2 routing differs: {other:?}"),
            }
        }
    }

    #[test]
    fn checkpoint_manifest_lists_every_tensor() {
        let (model, _, _) = trained_toy_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 13).unwrap();
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        let count = manifest["stage1"]["tensors"].as_array().unwrap().len()
            + manifest["stage2"]["tensors"].as_array().unwrap().len();
        let expected =
            model.stage1.tensors().len() + model.stage2.as_ref().map_or(0, |s| s.tensors().len());
        assert_eq!(count, expected);
    }

    #[test]
    fn corrupted_weights_are_rejected_at_load() {
        let (model, _, _) = trained_toy_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 13).unwrap();
        let path = dir.path().join("weights.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let target = bytes.len() / 2;
        bytes[target] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn truncated_weights_are_rejected_at_load() {
        let (model, _, _) = trained_toy_model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 13).unwrap();
        let path = dir.path().join("weights.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn curves_csv_has_expected_layout() {
        let history = TrainHistory {
            epochs: vec![
                EpochStats {
                    epoch: 1,
                    train_loss: 0.7,
                    train_acc: 0.5,
                    test_acc: 0.5,
                },
                EpochStats {
                    epoch: 2,
                    train_loss: 0.6,
                    train_acc: 0.75,
                    test_acc: 0.625,
                },
            ],
            best_epoch: 2,
        };
        let path = std::env::temp_dir().join("hierclass_curves_test.csv");
        write_curves(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,train_acc,test_acc");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,0.7,"));
    }
}
