//! Exact analytic gradients of the mean batch loss with respect to every
//! parameter tensor, mirrored through the forward trace.

use ndarray::{s, Array1, Array2, Axis};

use super::encoder::{forward, ln_stats, ForwardTrace};
use super::{bce_loss, ce_loss, sigmoid, softmax, Example, HeadKind, ModelParams, PROB_EPS};
use crate::tokenizer::TokenSequence;

/// Mean loss over the batch and gradients shaped like the parameters.
pub fn forward_backward(
    params: &ModelParams,
    batch: &[Example],
    kind: HeadKind,
) -> (f64, ModelParams) {
    assert!(!batch.is_empty(), "batch must be non-empty");
    check_head(params, kind);

    let mut grads = ModelParams::zeros(&params.config);
    let mut loss_sum = 0.0;
    for ex in batch {
        let trace = forward(params, &ex.seq, &ex.senti);
        let (loss, d_logits) = loss_and_dlogits(&trace.logits, ex.label, kind);
        loss_sum += loss;
        backward_example(params, &trace, &ex.seq, &d_logits, &mut grads);
    }
    let inv_b = 1.0 / batch.len() as f64;
    for slice in grads.tensors_mut() {
        for x in slice.iter_mut() {
            *x *= inv_b;
        }
    }
    (loss_sum * inv_b, grads)
}

/// Mean loss only; the forward half of [`forward_backward`]. Used by the
/// finite-difference gradient check, which must not touch the analytic
/// backward path it verifies.
pub fn batch_loss(params: &ModelParams, batch: &[Example], kind: HeadKind) -> f64 {
    assert!(!batch.is_empty(), "batch must be non-empty");
    check_head(params, kind);
    let mut loss_sum = 0.0;
    for ex in batch {
        let trace = forward(params, &ex.seq, &ex.senti);
        let (loss, _) = loss_and_dlogits(&trace.logits, ex.label, kind);
        loss_sum += loss;
    }
    loss_sum / batch.len() as f64
}

fn check_head(params: &ModelParams, kind: HeadKind) {
    match kind {
        HeadKind::Binary => assert_eq!(
            params.config.n_classes, 1,
            "binary head requires n_classes = 1"
        ),
        HeadKind::Multiclass => assert!(
            params.config.n_classes >= 2,
            "multiclass head requires n_classes >= 2"
        ),
    }
}

/// Loss of one example and the gradient at the logits. The probability
/// clamp inside the losses is flat, so a clamped prediction contributes
/// zero gradient.
fn loss_and_dlogits(logits: &Array1<f64>, label: u32, kind: HeadKind) -> (f64, Array1<f64>) {
    match kind {
        HeadKind::Binary => {
            let p = sigmoid(logits[0]);
            let loss = bce_loss(p, label);
            let dz = if p > PROB_EPS && p < 1.0 - PROB_EPS {
                p - label as f64
            } else {
                0.0
            };
            (loss, Array1::from_vec(vec![dz]))
        }
        HeadKind::Multiclass => {
            let dist = softmax(logits.as_slice().expect("standard layout"));
            let y = label as usize;
            let loss = ce_loss(&dist, y);
            let d = if dist[y] > PROB_EPS && dist[y] < 1.0 - PROB_EPS {
                dist.iter()
                    .enumerate()
                    .map(|(j, &p)| p - if j == y { 1.0 } else { 0.0 })
                    .collect()
            } else {
                vec![0.0; dist.len()]
            };
            (loss, Array1::from_vec(d))
        }
    }
}

/// Accumulate one example's parameter gradients into `grads`.
fn backward_example(
    params: &ModelParams,
    trace: &ForwardTrace,
    seq: &TokenSequence,
    d_logits: &Array1<f64>,
    grads: &mut ModelParams,
) {
    let config = &params.config;
    let d = config.d_model;
    let n_heads = config.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let len = config.max_len;

    // Head: logits = fused . head_w + head_b
    grads.head_b += d_logits;
    let fused_col = trace.fused.view().insert_axis(Axis(1));
    let dl_row = d_logits.view().insert_axis(Axis(0));
    grads.head_w += &fused_col.dot(&dl_row);
    let d_fused = params.head_w.dot(d_logits);

    // Only the [CLS] position feeds the head.
    let mut d_hidden: Array2<f64> = Array2::zeros((len, d));
    d_hidden.row_mut(0).assign(&d_fused.slice(s![..d]));

    for idx in (0..config.n_layers).rev() {
        let layer = &params.layers[idx];
        let ltr = &trace.layers[idx];
        let g = &mut grads.layers[idx];

        let d_res2 = layer_norm_backward(
            &ltr.res2,
            &layer.ln2_gain,
            &d_hidden,
            &mut g.ln2_gain,
            &mut g.ln2_bias,
        );

        // res2 = h1 + relu(ff_pre) . ff_w2 + ff_b2
        let ff_act = ltr.ff_pre.mapv(|x| x.max(0.0));
        g.ff_w2 += &ff_act.t().dot(&d_res2);
        g.ff_b2 += &d_res2.sum_axis(Axis(0));
        let d_act = d_res2.dot(&layer.ff_w2.t());
        let relu_gate = ltr.ff_pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let d_pre = &d_act * &relu_gate;
        g.ff_w1 += &ltr.h1.t().dot(&d_pre);
        g.ff_b1 += &d_pre.sum_axis(Axis(0));
        let mut d_h1 = d_pre.dot(&layer.ff_w1.t());
        d_h1 += &d_res2;

        let d_res1 = layer_norm_backward(
            &ltr.res1,
            &layer.ln1_gain,
            &d_h1,
            &mut g.ln1_gain,
            &mut g.ln1_bias,
        );

        // res1 = input + ctx . w_o
        g.w_o += &ltr.ctx.t().dot(&d_res1);
        let d_ctx = d_res1.dot(&layer.w_o.t());

        let mut d_q: Array2<f64> = Array2::zeros((len, d));
        let mut d_k: Array2<f64> = Array2::zeros((len, d));
        let mut d_v: Array2<f64> = Array2::zeros((len, d));
        for h in 0..n_heads {
            let attn = &ltr.attn[h];
            let d_ctxh = d_ctx.slice(s![.., h * dh..(h + 1) * dh]);
            let vh = ltr.v.slice(s![.., h * dh..(h + 1) * dh]);
            let qh = ltr.q.slice(s![.., h * dh..(h + 1) * dh]);
            let kh = ltr.k.slice(s![.., h * dh..(h + 1) * dh]);

            let d_attn = d_ctxh.dot(&vh.t());
            let d_vh = attn.t().dot(&d_ctxh);
            // Masked key columns carry zero attention weight, so their
            // score gradient vanishes without special handling.
            let d_scores = softmax_rows_backward(attn, &d_attn);

            let mut dq = d_q.slice_mut(s![.., h * dh..(h + 1) * dh]);
            dq += &(d_scores.dot(&kh) * scale);
            let mut dk = d_k.slice_mut(s![.., h * dh..(h + 1) * dh]);
            dk += &(d_scores.t().dot(&qh) * scale);
            d_v.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&d_vh);
        }

        g.w_q += &ltr.input.t().dot(&d_q);
        g.w_k += &ltr.input.t().dot(&d_k);
        g.w_v += &ltr.input.t().dot(&d_v);

        let mut d_input = d_q.dot(&layer.w_q.t());
        d_input += &d_k.dot(&layer.w_k.t());
        d_input += &d_v.dot(&layer.w_v.t());
        d_input += &d_res1;
        d_hidden = d_input;
    }

    // Embeddings contribute only at masked-in positions.
    for t in 0..len {
        if seq.mask[t] == 1 {
            let row = d_hidden.row(t);
            let mut emb = grads.token_emb.row_mut(seq.ids[t] as usize);
            emb += &row;
            let mut pos = grads.pos_emb.row_mut(t);
            pos += &row;
        }
    }
}

/// Backward of row-wise layer norm; accumulates gain/bias gradients and
/// returns the input gradient.
fn layer_norm_backward(
    input: &Array2<f64>,
    gain: &Array1<f64>,
    d_out: &Array2<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, cols) = input.dim();
    let n = cols as f64;
    let mut d_input = Array2::zeros((rows, cols));
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let x = input.row(i);
        let (mean, inv_std) = ln_stats(x.as_slice().expect("standard layout"));
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..cols {
            xhat[j] = (x[j] - mean) * inv_std;
            dxhat[j] = d_out[[i, j]] * gain[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
            d_gain[j] += d_out[[i, j]] * xhat[j];
            d_bias[j] += d_out[[i, j]];
        }
        m1 /= n;
        m2 /= n;
        for j in 0..cols {
            d_input[[i, j]] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    d_input
}

/// Backward of the row-wise softmax: `dS = A * (dA - rowsum(A * dA))`.
fn softmax_rows_backward(attn: &Array2<f64>, d_attn: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = attn.dim();
    let mut d_scores = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut dot = 0.0;
        for j in 0..cols {
            dot += attn[[i, j]] * d_attn[[i, j]];
        }
        for j in 0..cols {
            d_scores[[i, j]] = attn[[i, j]] * (d_attn[[i, j]] - dot);
        }
    }
    d_scores
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{random_example, tiny_config};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn absent_token_ids_get_zero_embedding_gradient() {
        let config = tiny_config(1, 21);
        let params = ModelParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let batch: Vec<Example> = (0..3).map(|_| random_example(&mut rng, &config)).collect();
        let (_, grads) = forward_backward(&params, &batch, HeadKind::Binary);

        let mut present = std::collections::HashSet::new();
        for ex in &batch {
            for (t, &id) in ex.seq.ids.iter().enumerate() {
                if ex.seq.mask[t] == 1 {
                    present.insert(id as usize);
                }
            }
        }
        for id in 0..config.vocab_size {
            let row = grads.token_emb.row(id);
            if present.contains(&id) {
                continue;
            }
            assert!(
                row.iter().all(|&x| x == 0.0),
                "absent id {id} received gradient"
            );
        }
        // At least one present id must have a nonzero gradient.
        assert!(present
            .iter()
            .any(|&id| grads.token_emb.row(id).iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn duplicating_batch_elements_keeps_mean_gradients() {
        let config = tiny_config(3, 23);
        let params = ModelParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let batch: Vec<Example> = (0..2).map(|_| random_example(&mut rng, &config)).collect();
        let doubled: Vec<Example> = batch
            .iter()
            .flat_map(|ex| [ex.clone(), ex.clone()])
            .collect();

        let (loss_a, grads_a) = forward_backward(&params, &batch, HeadKind::Multiclass);
        let (loss_b, grads_b) = forward_backward(&params, &doubled, HeadKind::Multiclass);
        assert!((loss_a - loss_b).abs() < 1e-12);
        for ((_, a, _), (_, b, _)) in grads_a.tensors().iter().zip(grads_b.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn clamped_perfect_prediction_has_zero_head_gradient() {
        let config = tiny_config(1, 25);
        let mut params = ModelParams::init(&config).unwrap();
        // Force a hugely confident correct logit via the head bias.
        params.head_b[0] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut ex = random_example(&mut rng, &config);
        ex.label = 1;
        let (loss, grads) = forward_backward(&params, &[ex], HeadKind::Binary);
        assert!(loss < 1.1e-7);
        assert!(grads.head_w.iter().all(|&x| x == 0.0));
        assert!(grads.head_b.iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "binary head requires")]
    fn head_kind_mismatch_is_rejected() {
        let config = tiny_config(3, 27);
        let params = ModelParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let ex = random_example(&mut rng, &config);
        forward_backward(&params, &[ex], HeadKind::Binary);
    }
}
