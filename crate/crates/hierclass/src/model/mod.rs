//! The trainable core: embeddings, transformer encoder stack, `[CLS]`
//! pooling, sentiment fusion, classification heads, losses and exact
//! analytic gradients. All arithmetic is f64 with a fixed evaluation
//! order, so identical inputs produce bit-identical results.

mod encoder;
mod grad;

pub use encoder::{forward, forward_batch, ForwardTrace, LayerTrace};
pub use grad::{batch_loss, forward_backward};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sentiment::{SentimentFeatures, SENTIMENT_DIM};
use crate::tokenizer::TokenSequence;

/// Clamp applied to probabilities inside the loss functions.
pub const PROB_EPS: f64 = 1e-7;

/// Epsilon inside the layer-norm variance square root.
pub(crate) const LN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub sentiment_dim: usize,
    /// 1 selects the single-logit sigmoid head, k >= 2 the softmax head.
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.n_layers < 1 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.d_ff < 1 {
            return Err(Error::Config("d_ff must be at least 1".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(
                "vocab_size must cover the special ids".into(),
            ));
        }
        if self.sentiment_dim != SENTIMENT_DIM {
            return Err(Error::Config(format!(
                "sentiment_dim must be {SENTIMENT_DIM}, got {}",
                self.sentiment_dim
            )));
        }
        if self.n_classes < 1 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_input_dim(&self) -> usize {
        self.d_model + self.sentiment_dim
    }
}

/// Per-layer weights. Attention projections carry no biases; the
/// feed-forward matrices do, and each sublayer has a layer-norm pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

/// All trainable tensors of one encoder + head. The same shape doubles as
/// the gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// One training item: encoded text, its sentiment features and a class
/// index (0/1 for the binary head, 0..k-1 for the multiclass head).
#[derive(Debug, Clone)]
pub struct Example {
    pub seq: TokenSequence,
    pub senti: SentimentFeatures,
    pub label: u32,
}

/// Which loss/activation the head uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Binary,
    Multiclass,
}

impl ModelParams {
    /// Xavier-uniform weights (bound `sqrt(6 / (fan_in + fan_out))` per
    /// matrix), zero biases, unit layer-norm gains; fully determined by
    /// `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ModelParams::zeros(config);
        for layer in &mut params.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
        }
        // Weight matrices are drawn in canonical tensor order.
        let mut fill = |m: &mut Array2<f64>| {
            let (rows, cols) = m.dim();
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for x in m.iter_mut() {
                *x = bound * (2.0 * rng.gen::<f64>() - 1.0);
            }
        };
        fill(&mut params.token_emb);
        fill(&mut params.pos_emb);
        for layer in &mut params.layers {
            fill(&mut layer.w_q);
            fill(&mut layer.w_k);
            fill(&mut layer.w_v);
            fill(&mut layer.w_o);
            fill(&mut layer.ff_w1);
            fill(&mut layer.ff_w2);
        }
        fill(&mut params.head_w);
        Ok(params)
    }

    /// All-zero tensors of the configured shapes (gradient/moment buffers).
    pub fn zeros(config: &ModelConfig) -> ModelParams {
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                w_q: Array2::zeros((d, d)),
                w_k: Array2::zeros((d, d)),
                w_v: Array2::zeros((d, d)),
                w_o: Array2::zeros((d, d)),
                ff_w1: Array2::zeros((d, config.d_ff)),
                ff_b1: Array1::zeros(config.d_ff),
                ff_w2: Array2::zeros((config.d_ff, d)),
                ff_b2: Array1::zeros(d),
                ln1_gain: Array1::zeros(d),
                ln1_bias: Array1::zeros(d),
                ln2_gain: Array1::zeros(d),
                ln2_bias: Array1::zeros(d),
            })
            .collect();
        ModelParams {
            config: config.clone(),
            token_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            layers,
            head_w: Array2::zeros((config.head_input_dim(), config.n_classes)),
            head_b: Array1::zeros(config.n_classes),
        }
    }

    /// Tensor (name, data, shape) triples in canonical order. This order
    /// defines weight-file layout, init draw order and optimizer traversal.
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        fn push2<'a>(
            out: &mut Vec<(String, &'a [f64], Vec<usize>)>,
            name: String,
            a: &'a Array2<f64>,
        ) {
            out.push((
                name,
                a.as_slice().expect("standard layout"),
                a.shape().to_vec(),
            ));
        }
        fn push1<'a>(
            out: &mut Vec<(String, &'a [f64], Vec<usize>)>,
            name: String,
            a: &'a Array1<f64>,
        ) {
            out.push((
                name,
                a.as_slice().expect("standard layout"),
                a.shape().to_vec(),
            ));
        }
        let mut out: Vec<(String, &[f64], Vec<usize>)> = Vec::new();
        push2(&mut out, "token_emb".into(), &self.token_emb);
        push2(&mut out, "pos_emb".into(), &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            push2(&mut out, format!("layer{i}.w_q"), &layer.w_q);
            push2(&mut out, format!("layer{i}.w_k"), &layer.w_k);
            push2(&mut out, format!("layer{i}.w_v"), &layer.w_v);
            push2(&mut out, format!("layer{i}.w_o"), &layer.w_o);
            push2(&mut out, format!("layer{i}.ff_w1"), &layer.ff_w1);
            push1(&mut out, format!("layer{i}.ff_b1"), &layer.ff_b1);
            push2(&mut out, format!("layer{i}.ff_w2"), &layer.ff_w2);
            push1(&mut out, format!("layer{i}.ff_b2"), &layer.ff_b2);
            push1(&mut out, format!("layer{i}.ln1_gain"), &layer.ln1_gain);
            push1(&mut out, format!("layer{i}.ln1_bias"), &layer.ln1_bias);
            push1(&mut out, format!("layer{i}.ln2_gain"), &layer.ln2_gain);
            push1(&mut out, format!("layer{i}.ln2_bias"), &layer.ln2_bias);
        }
        push2(&mut out, "head_w".into(), &self.head_w);
        push1(&mut out, "head_b".into(), &self.head_b);
        out
    }

    /// Mutable views of every tensor, in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.token_emb.as_slice_mut().expect("standard layout"));
        out.push(self.pos_emb.as_slice_mut().expect("standard layout"));
        for layer in &mut self.layers {
            out.push(layer.w_q.as_slice_mut().expect("standard layout"));
            out.push(layer.w_k.as_slice_mut().expect("standard layout"));
            out.push(layer.w_v.as_slice_mut().expect("standard layout"));
            out.push(layer.w_o.as_slice_mut().expect("standard layout"));
            out.push(layer.ff_w1.as_slice_mut().expect("standard layout"));
            out.push(layer.ff_b1.as_slice_mut().expect("standard layout"));
            out.push(layer.ff_w2.as_slice_mut().expect("standard layout"));
            out.push(layer.ff_b2.as_slice_mut().expect("standard layout"));
            out.push(layer.ln1_gain.as_slice_mut().expect("standard layout"));
            out.push(layer.ln1_bias.as_slice_mut().expect("standard layout"));
            out.push(layer.ln2_gain.as_slice_mut().expect("standard layout"));
            out.push(layer.ln2_bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head_w.as_slice_mut().expect("standard layout"));
        out.push(self.head_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, data, _)| data.len()).sum()
    }

    /// Round every value to its nearest f32. Trained parameters pass
    /// through this so the f32 checkpoint roundtrip is lossless.
    pub fn round_to_f32(&mut self) {
        for slice in self.tensors_mut() {
            for x in slice.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        if self.config.n_classes == 1 {
            HeadKind::Binary
        } else {
            HeadKind::Multiclass
        }
    }
}

/// Logistic function, the binary head's activation.
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable softmax over a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with the probability
/// clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(p: f64, label: u32) -> f64 {
    assert!(label <= 1, "binary label must be 0 or 1, got {label}");
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Cross-entropy `-ln dist[class]` with the same probability clamp.
/// Panics when `class` is out of range.
pub fn ce_loss(dist: &[f64], class: usize) -> f64 {
    assert!(
        class < dist.len(),
        "class {class} out of range for {} classes",
        dist.len()
    );
    -dist[class].clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Well-formed random model inputs, used by the gradient check and the
/// normalization-invariant tests.
pub mod synth {
    use super::*;
    use crate::tokenizer::{CLS_ID, SEP_ID, UNK_ID};

    /// A valid random token sequence: CLS, random content ids, SEP, padding.
    pub fn random_sequence(rng: &mut impl Rng, config: &ModelConfig) -> TokenSequence {
        let used = rng.gen_range(2..=config.max_len);
        let mut ids = vec![CLS_ID];
        for _ in 0..used - 2 {
            ids.push(rng.gen_range(UNK_ID + 1..config.vocab_size as u32));
        }
        ids.push(SEP_ID);
        ids.resize(config.max_len, 0);
        let mut mask = vec![1u8; used];
        mask.resize(config.max_len, 0);
        TokenSequence { ids, mask }
    }

    /// A feature vector inside the declared bounds.
    pub fn random_features(rng: &mut impl Rng) -> SentimentFeatures {
        let mut f = [0.0; SENTIMENT_DIM];
        f[0] = 2.0 * rng.gen::<f64>() - 1.0;
        for x in f.iter_mut().skip(1) {
            *x = rng.gen::<f64>() * 0.4;
        }
        SentimentFeatures(f)
    }

    pub fn random_example(rng: &mut impl Rng, config: &ModelConfig) -> Example {
        let n_labels = if config.n_classes == 1 {
            2
        } else {
            config.n_classes
        };
        Example {
            seq: random_sequence(rng, config),
            senti: random_features(rng),
            label: rng.gen_range(0..n_labels as u32),
        }
    }
}
