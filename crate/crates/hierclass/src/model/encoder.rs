//! Encoder forward pass. Keeps every intermediate needed by the backward
//! pass in a [`ForwardTrace`].

use ndarray::{s, Array1, Array2};

use super::{ModelParams, LN_EPS};
use crate::sentiment::SentimentFeatures;
use crate::tokenizer::TokenSequence;

/// Intermediates of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Input hidden states (L x d).
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head attention weights (each L x L). Rows over unmasked keys
    /// sum to 1; masked key columns are exactly zero.
    pub attn: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub ctx: Array2<f64>,
    /// Residual sum entering the first layer norm.
    pub res1: Array2<f64>,
    /// Output of the first layer norm, input to the feed-forward.
    pub h1: Array2<f64>,
    /// Feed-forward pre-activation (L x d_ff).
    pub ff_pre: Array2<f64>,
    /// Residual sum entering the second layer norm.
    pub res2: Array2<f64>,
    /// Layer output (L x d).
    pub output: Array2<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Embedded input (L x d); zero rows at padding positions.
    pub x0: Array2<f64>,
    pub layers: Vec<LayerTrace>,
    /// Final hidden state of the `[CLS]` position.
    pub cls: Array1<f64>,
    /// `[CLS]` vector concatenated with the sentiment features.
    pub fused: Array1<f64>,
    /// Head output: 1 logit for the binary head, k logits otherwise.
    pub logits: Array1<f64>,
}

/// Row-wise softmax over unmasked key positions; masked columns get
/// exactly zero weight.
fn masked_softmax_rows(scores: &Array2<f64>, mask: &[u8]) -> Array2<f64> {
    let (rows, cols) = scores.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if mask[j] == 1 {
                max = max.max(scores[[i, j]]);
            }
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if mask[j] == 1 {
                let e = (scores[[i, j]] - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
        }
        for j in 0..cols {
            if mask[j] == 1 {
                out[[i, j]] /= sum;
            }
        }
    }
    out
}

/// Per-row mean and inverse standard deviation used by layer norm.
pub(super) fn ln_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Layer norm across the feature dimension of each row.
pub(super) fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let row = x.row(i);
        let (mean, inv_std) = ln_stats(row.as_slice().expect("standard layout"));
        for j in 0..cols {
            let xhat = (row[j] - mean) * inv_std;
            out[[i, j]] = gain[j] * xhat + bias[j];
        }
    }
    out
}

/// Full forward pass for one example. Embeddings are looked up only at
/// masked-in positions, so padding ids never influence the output.
pub fn forward(
    params: &ModelParams,
    seq: &TokenSequence,
    senti: &SentimentFeatures,
) -> ForwardTrace {
    let config = &params.config;
    assert_eq!(
        seq.ids.len(),
        config.max_len,
        "sequence length {} does not match configured max_len {}",
        seq.ids.len(),
        config.max_len
    );
    let d = config.d_model;
    let n_heads = config.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let len = config.max_len;

    let mut x0 = Array2::zeros((len, d));
    for t in 0..len {
        if seq.mask[t] == 1 {
            let id = seq.ids[t] as usize;
            assert!(id < config.vocab_size, "token id {id} out of range");
            let emb = &params.token_emb.row(id) + &params.pos_emb.row(t);
            x0.row_mut(t).assign(&emb);
        }
    }

    let mut hidden = x0.clone();
    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let input = hidden;
        let q = input.dot(&layer.w_q);
        let k = input.dot(&layer.w_k);
        let v = input.dot(&layer.w_v);

        let mut ctx = Array2::zeros((len, d));
        let mut attn = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let span = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(span);
            let kh = k.slice(span);
            let vh = v.slice(span);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            let weights = masked_softmax_rows(&scores, &seq.mask);
            ctx.slice_mut(span).assign(&weights.dot(&vh));
            attn.push(weights);
        }

        let attn_out = ctx.dot(&layer.w_o);
        let res1 = &input + &attn_out;
        let h1 = layer_norm(&res1, &layer.ln1_gain, &layer.ln1_bias);

        let ff_pre = h1.dot(&layer.ff_w1) + &layer.ff_b1;
        let ff_act = ff_pre.mapv(|x| x.max(0.0));
        let ff_out = ff_act.dot(&layer.ff_w2) + &layer.ff_b2;
        let res2 = &h1 + &ff_out;
        let output = layer_norm(&res2, &layer.ln2_gain, &layer.ln2_bias);

        hidden = output.clone();
        layers.push(LayerTrace {
            input,
            q,
            k,
            v,
            attn,
            ctx,
            res1,
            h1,
            ff_pre,
            res2,
            output,
        });
    }

    let cls = hidden.row(0).to_owned();
    let mut fused = Array1::zeros(config.head_input_dim());
    fused.slice_mut(s![..d]).assign(&cls);
    fused
        .slice_mut(s![d..])
        .assign(&Array1::from_vec(senti.as_slice().to_vec()));
    let logits = fused.dot(&params.head_w) + &params.head_b;

    ForwardTrace {
        x0,
        layers,
        cls,
        fused,
        logits,
    }
}

/// Forward a batch and return the n x k logit matrix (k = 1 for the
/// binary head).
pub fn forward_batch(
    params: &ModelParams,
    inputs: &[(TokenSequence, SentimentFeatures)],
) -> Array2<f64> {
    let mut out = Array2::zeros((inputs.len(), params.config.n_classes));
    for (i, (seq, senti)) in inputs.iter().enumerate() {
        let trace = forward(params, seq, senti);
        out.row_mut(i).assign(&trace.logits);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{random_features, random_sequence, tiny_config};
    use super::super::ModelParams;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_sum_to_one_over_unmasked_keys() {
        let config = tiny_config(1, 3);
        let params = ModelParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let seq = random_sequence(&mut rng, &config);
            let senti = random_features(&mut rng);
            let trace = forward(&params, &seq, &senti);
            for layer in &trace.layers {
                for attn in &layer.attn {
                    for i in 0..config.max_len {
                        let sum: f64 = attn.row(i).sum();
                        assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                        for j in 0..config.max_len {
                            if seq.mask[j] == 0 {
                                assert_eq!(attn[[i, j]], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn padding_ids_do_not_change_output() {
        let config = tiny_config(3, 5);
        let params = ModelParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let seq = random_sequence(&mut rng, &config);
        let senti = random_features(&mut rng);
        let baseline = forward(&params, &seq, &senti);

        let mut altered = seq.clone();
        let mut changed = false;
        for t in 0..config.max_len {
            if altered.mask[t] == 0 {
                altered.ids[t] = rng.gen_range(0..config.vocab_size as u32);
                changed = true;
            }
        }
        assert!(changed, "sequence had no padding to alter");
        let modified = forward(&params, &altered, &senti);
        assert_eq!(baseline.logits, modified.logits);
        assert_eq!(baseline.cls, modified.cls);
    }

    #[test]
    fn batch_logits_have_n_by_k_shape() {
        let config = tiny_config(4, 2);
        let params = ModelParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs: Vec<_> = (0..5)
            .map(|_| {
                (
                    random_sequence(&mut rng, &config),
                    random_features(&mut rng),
                )
            })
            .collect();
        let logits = forward_batch(&params, &inputs);
        assert_eq!(logits.dim(), (5, 4));
        // Rows match per-example forwards.
        for (i, (seq, senti)) in inputs.iter().enumerate() {
            let trace = forward(&params, seq, senti);
            assert_eq!(logits.row(i).to_vec(), trace.logits.to_vec());
        }
    }

    #[test]
    fn fused_vector_has_head_input_dim_and_carries_sentiment() {
        let config = tiny_config(1, 2);
        let params = ModelParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let seq = random_sequence(&mut rng, &config);
        let senti = random_features(&mut rng);
        let trace = forward(&params, &seq, &senti);
        assert_eq!(trace.fused.len(), config.d_model + 9);
        assert_eq!(&trace.fused.to_vec()[config.d_model..], senti.as_slice());
        assert_eq!(trace.logits.len(), 1);
    }

    #[test]
    fn layer_norm_rows_are_normalized_before_gain_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let row: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let (mean, inv_std) = ln_stats(&row);
            let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv_std).collect();
            let m: f64 = xhat.iter().sum::<f64>() / 16.0;
            let v: f64 = xhat.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6, "normalized mean {m}");
            assert!((v - 1.0).abs() < 1e-5, "normalized variance {v}");
        }
    }
}
