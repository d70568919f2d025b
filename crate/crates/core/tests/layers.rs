//! Layer behavior against independent oracles: a naive per-head attention
//! loop, hand-computed residual compositions, parameter-count formulas,
//! and closed-form substitution for patch embeddings.

use rand::Rng;
use vl_core::layers::{
    encode, CrossModalBlock, EncoderBlock, MultiHeadAttention, PatchEmbedding, LAYER_NORM_EPS,
};
use vl_core::rng::{stream, Domain};
use vl_core::tensor::{finite_diff_check_params, sample_active_coordinates, Graph, Tensor};
use vl_core::{Error, KeyMask, Tensor64};

fn rand_fill(t: &Tensor64, seed: u64) {
    let mut rng = stream(seed, Domain::Init, 77, 0);
    t.update_data(|d| {
        for v in d.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    });
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor64 {
    let t = Tensor::zeros(shape);
    rand_fill(&t, seed);
    t
}

fn rand_attention(dim: usize, heads: usize, seed: u64) -> MultiHeadAttention<f64> {
    let attn = MultiHeadAttention::new(dim, heads);
    for (i, (_, p)) in collect(&attn).iter().enumerate() {
        rand_fill(p, seed + i as u64);
    }
    attn
}

fn collect(attn: &MultiHeadAttention<f64>) -> Vec<(String, Tensor64)> {
    let mut out = Vec::new();
    attn.collect("attn", &mut out);
    out
}

fn assert_bits_eq(a: &Tensor64, b: &Tensor64) {
    let (av, bv) = (a.to_vec(), b.to_vec());
    assert_eq!(av.len(), bv.len());
    for (x, y) in av.iter().zip(&bv) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn identical_keys_give_mean_of_values_before_output_projection() {
    let g = Graph::inference();
    let attn = rand_attention(8, 2, 10);
    // 3 queries, 4 identical keys.
    let queries = rand_tensor(&[1, 3, 8], 11);
    let key_row = rand_tensor(&[8], 12);
    let mut kv = Vec::new();
    for _ in 0..4 {
        kv.extend_from_slice(&key_row.to_vec());
    }
    let keys = Tensor::from_vec(vec![1, 4, 8], kv).unwrap();

    let out = attn.attend(&g, &queries, &keys, None).unwrap();
    // Uniform weights over identical keys: context = mean of projected
    // values = projected value of the (single) key row.
    let v = attn.wv.forward(&g, &keys).unwrap();
    let expected = &v.to_vec()[..8];
    for q in 0..3 {
        assert_close(&out.to_vec()[q * 8..(q + 1) * 8], expected, 1e-12);
    }
}

#[test]
fn single_unmasked_key_passes_its_value_through() {
    let g = Graph::inference();
    let attn = rand_attention(8, 2, 20);
    let queries = rand_tensor(&[1, 3, 8], 21);
    let keys = rand_tensor(&[1, 4, 8], 22);
    let mask = KeyMask::new(1, 4, vec![false, false, true, false]);

    let out = attn.attend(&g, &queries, &keys, Some(&mask)).unwrap();
    let v = attn.wv.forward(&g, &keys).unwrap();
    let expected = &v.to_vec()[2 * 8..3 * 8];
    for q in 0..3 {
        assert_close(&out.to_vec()[q * 8..(q + 1) * 8], expected, 1e-12);
    }
}

/// Naive attention oracle: materializes each head's full weight matrix
/// with explicit loops.
fn attention_oracle(
    attn: &MultiHeadAttention<f64>,
    queries: &Tensor64,
    keys: &Tensor64,
    mask: Option<&KeyMask>,
) -> Vec<f64> {
    let g = Graph::inference();
    let (tq, tk, d, h) = (queries.shape()[1], keys.shape()[1], attn.dim, attn.heads);
    let hd = d / h;
    let q = attn.wq.forward(&g, queries).unwrap().to_vec();
    let k = attn.wk.forward(&g, keys).unwrap().to_vec();
    let v = attn.wv.forward(&g, keys).unwrap().to_vec();
    let mut merged = vec![0.0; tq * d];
    for head in 0..h {
        for i in 0..tq {
            let mut weights = vec![f64::NEG_INFINITY; tk];
            for j in 0..tk {
                if mask.map_or(true, |m| m.keep(0, j)) {
                    let mut dot = 0.0;
                    for e in 0..hd {
                        dot += q[i * d + head * hd + e] * k[j * d + head * hd + e];
                    }
                    weights[j] = dot / (hd as f64).sqrt();
                }
            }
            let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = weights
                .iter()
                .map(|w| if w.is_finite() { (w - max).exp() } else { 0.0 })
                .collect();
            let denom: f64 = exps.iter().sum();
            for e in 0..hd {
                let mut acc = 0.0;
                for j in 0..tk {
                    acc += exps[j] / denom * v[j * d + head * hd + e];
                }
                merged[i * d + head * hd + e] = acc;
            }
        }
    }
    // Output projection.
    let w = attn.wo.weight.to_vec();
    let b = attn.wo.bias.to_vec();
    let mut out = vec![0.0; tq * d];
    for i in 0..tq {
        for o in 0..d {
            let mut acc = b[o];
            for e in 0..d {
                acc += merged[i * d + e] * w[e * d + o];
            }
            out[i * d + o] = acc;
        }
    }
    out
}

#[test]
fn two_head_attention_matches_per_head_loop_oracle() {
    let g = Graph::inference();
    let attn = rand_attention(8, 2, 30);
    let queries = rand_tensor(&[1, 3, 8], 31);
    let keys = rand_tensor(&[1, 3, 8], 32);

    let out = attn.forward(&g, &queries, &keys, None).unwrap();
    let expected = attention_oracle(&attn, &queries, &keys, None);
    assert_close(&out.to_vec(), &expected, 1e-10);

    let mask = KeyMask::new(1, 3, vec![true, false, true]);
    let out = attn.forward(&g, &queries, &keys, Some(&mask)).unwrap();
    let expected = attention_oracle(&attn, &queries, &keys, Some(&mask));
    assert_close(&out.to_vec(), &expected, 1e-10);
}

#[test]
fn encode_with_zero_blocks_is_identity() {
    let g = Graph::inference();
    let x = rand_tensor(&[2, 4, 8], 40);
    let out = encode::<f64>(&g, &[], &x, None).unwrap();
    assert_bits_eq(&out, &x);
}

#[test]
fn block_with_zeroed_output_projections_is_pure_norm_wiring() {
    let g = Graph::inference();
    let block = EncoderBlock::<f64>::new(8, 2, 16, 0.0);
    let mut params = Vec::new();
    block.collect("b", &mut params);
    for (i, (_, p)) in params.iter().enumerate() {
        rand_fill(p, 50 + i as u64);
    }
    // Zero the projections that feed the residual adds: the attention
    // sublayer and FFN then contribute exactly nothing.
    block.attn.wo.weight.update_data(|d| d.fill(0.0));
    block.attn.wo.bias.update_data(|d| d.fill(0.0));
    block.ffn.w2.weight.update_data(|d| d.fill(0.0));
    block.ffn.w2.bias.update_data(|d| d.fill(0.0));

    let x = rand_tensor(&[1, 3, 8], 60);
    let out = block.forward(&g, &x, None).unwrap();
    // Hand-computed post-norm composition: ln2(ln1(x) + 0).
    let expected = block
        .ln2
        .forward(&g, &block.ln1.forward(&g, &x).unwrap())
        .unwrap();
    assert_close(&out.to_vec(), &expected.to_vec(), 1e-12);
}

/// Parameter-walk oracle: closed-form per-block count
/// 4D^2+4D (attention) + 2DI+D+I (FFN) + 4D (two layer norms).
#[test]
fn encoder_parameter_count_matches_formula_oracle() {
    let (d, h, i, blocks) = (256usize, 4usize, 1028usize, 12usize);
    let formula_per_block = 4 * d * d + 4 * d + 2 * d * i + d + i + 4 * d;
    let mut walked = 0usize;
    for _ in 0..blocks {
        let block = EncoderBlock::<f64>::new(d, h, i, 0.0);
        let mut params = Vec::new();
        block.collect("b", &mut params);
        walked += params.iter().map(|(_, p)| p.len()).sum::<usize>();
    }
    assert_eq!(walked, blocks * formula_per_block);
    assert_eq!(walked, 9_501_744);
}

fn rand_cross_block(dim: usize, heads: usize, inter: usize, seed: u64) -> CrossModalBlock<f64> {
    let block = CrossModalBlock::new(dim, heads, inter, 0.0);
    let mut params = Vec::new();
    block.collect("x", &mut params);
    for (i, (name, p)) in params.iter().enumerate() {
        if name.ends_with(".gamma") {
            p.update_data(|d| d.fill(1.0));
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            p.update_data(|d| d.fill(0.0));
        } else {
            rand_fill(p, seed + i as u64);
        }
    }
    block
}

#[test]
fn cross_modal_block_is_symmetric_under_identical_streams() {
    let g = Graph::inference();
    let block = rand_cross_block(16, 4, 32, 70);
    // Give both streams identical weights (cross-attention is already a
    // single shared module).
    let mut text_params = Vec::new();
    block.text_self.collect("s", &mut text_params);
    block.text_ffn.collect("f", &mut text_params);
    let mut vision_params = Vec::new();
    block.vision_self.collect("s", &mut vision_params);
    block.vision_ffn.collect("f", &mut vision_params);
    for ((_, t), (_, v)) in text_params.iter().zip(&vision_params) {
        v.update_data(|d| d.copy_from_slice(&t.to_vec()));
    }
    for (t, v) in [
        (&block.text_ln_cross, &block.vision_ln_cross),
        (&block.text_ln_self, &block.vision_ln_self),
        (&block.text_ln_ffn, &block.vision_ln_ffn),
    ] {
        v.gamma.update_data(|d| d.copy_from_slice(&t.gamma.to_vec()));
        v.beta.update_data(|d| d.copy_from_slice(&t.beta.to_vec()));
    }

    let x = rand_tensor(&[1, 4, 16], 80);
    let (t_out, v_out) = block.forward(&g, &x, &x, None, None).unwrap();
    assert_bits_eq(&t_out, &v_out);
}

#[test]
fn cross_modal_forward_matches_sublayer_composition_oracle() {
    // Experiment-1 cross-modal shape: D_x = 256, 4 heads; 4 text x 5
    // vision tokens.
    let g = Graph::inference();
    let block = rand_cross_block(256, 4, 256, 90);
    let text = rand_tensor(&[1, 4, 256], 91);
    let vision = rand_tensor(&[1, 5, 256], 92);

    let (t_out, v_out) = block.forward(&g, &text, &vision, None, None).unwrap();

    // Step-by-step: both cross-attentions from the *entering* states,
    // each add&norm; then self-attention; then FFN.
    let t_cross = block.cross_attn.forward(&g, &text, &vision, None).unwrap();
    let v_cross = block.cross_attn.forward(&g, &vision, &text, None).unwrap();
    let t1 = block
        .text_ln_cross
        .forward(&g, &g.add(&text, &t_cross).unwrap())
        .unwrap();
    let v1 = block
        .vision_ln_cross
        .forward(&g, &g.add(&vision, &v_cross).unwrap())
        .unwrap();
    let t2 = block
        .text_ln_self
        .forward(&g, &g.add(&t1, &block.text_self.forward(&g, &t1, &t1, None).unwrap()).unwrap())
        .unwrap();
    let v2 = block
        .vision_ln_self
        .forward(
            &g,
            &g.add(&v1, &block.vision_self.forward(&g, &v1, &v1, None).unwrap()).unwrap(),
        )
        .unwrap();
    let t3 = block
        .text_ln_ffn
        .forward(&g, &g.add(&t2, &block.text_ffn.forward(&g, &t2).unwrap()).unwrap())
        .unwrap();
    let v3 = block
        .vision_ln_ffn
        .forward(&g, &g.add(&v2, &block.vision_ffn.forward(&g, &v2).unwrap()).unwrap())
        .unwrap();

    assert_bits_eq(&t_out, &t3);
    assert_bits_eq(&v_out, &v3);
}

#[test]
fn fully_masked_stream_is_an_error_in_cross_attention() {
    let g = Graph::inference();
    let block = rand_cross_block(16, 4, 32, 100);
    let text = rand_tensor(&[1, 4, 16], 101);
    let vision = rand_tensor(&[1, 5, 16], 102);
    let dead_mask = KeyMask::new(1, 5, vec![false; 5]);
    let err = block
        .forward(&g, &text, &vision, None, Some(&dead_mask))
        .unwrap_err();
    assert!(matches!(err, Error::DegenerateAttention { .. }));
}

#[test]
fn patch_embedding_geometry() {
    // 32x32 with patch 8: 16 patches, sequence length 17.
    let pe = PatchEmbedding::<f64>::new(32, 32, 3, 8, 16).unwrap();
    assert_eq!(pe.position_table.shape(), &[17, 16]);
    // Standard ViT geometry: 224/16 -> 196 patches.
    let pe = PatchEmbedding::<f64>::new(224, 224, 3, 16, 8).unwrap();
    assert_eq!(pe.position_table.shape(), &[197, 8]);
    // Non-divisible dims name the offending geometry.
    let msg = match PatchEmbedding::<f64>::new(30, 32, 3, 8, 16) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("expected a geometry error"),
    };
    assert!(msg.contains("30") && msg.contains('8'), "{msg}");
}

#[test]
fn zero_image_patch_tokens_reduce_to_bias_plus_position() {
    let g = Graph::inference();
    let pe = PatchEmbedding::<f64>::new(16, 16, 3, 8, 12).unwrap();
    let mut params = Vec::new();
    pe.collect("p", &mut params);
    for (i, (name, p)) in params.iter().enumerate() {
        if name.ends_with(".gamma") {
            p.update_data(|d| d.fill(1.0));
        } else {
            rand_fill(p, 110 + i as u64);
        }
    }
    let image = Tensor::zeros(&[1, 16, 16, 3]);
    let out = pe.forward(&g, &image).unwrap(); // [1, 5, 12]

    // Direct substitution: patch token j>=1 is LN(bias + pos[j]); the CLS
    // token is LN(cls + pos[0]).
    let bias = pe.projection.bias.to_vec();
    let cls = pe.cls_token.to_vec();
    let pos = pe.position_table.to_vec();
    for j in 0..5 {
        let base: Vec<f64> = (0..12)
            .map(|e| {
                let content = if j == 0 { cls[e] } else { bias[e] };
                content + pos[j * 12 + e]
            })
            .collect();
        let mean = base.iter().sum::<f64>() / 12.0;
        let var = base.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 12.0;
        let std = (var + LAYER_NORM_EPS).sqrt();
        let gamma = pe.ln.gamma.to_vec();
        let beta = pe.ln.beta.to_vec();
        let expected: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(e, v)| gamma[e] * (v - mean) / std + beta[e])
            .collect();
        assert_close(&out.to_vec()[j * 12..(j + 1) * 12], &expected, 1e-10);
    }
}

#[test]
fn masked_positions_never_influence_unmasked_outputs() {
    let g = Graph::inference();
    let blocks: Vec<EncoderBlock<f64>> = (0..2)
        .map(|i| {
            let b = EncoderBlock::new(8, 2, 16, 0.0);
            let mut params = Vec::new();
            b.collect("b", &mut params);
            for (j, (name, p)) in params.iter().enumerate() {
                if name.ends_with(".gamma") {
                    p.update_data(|d| d.fill(1.0));
                } else {
                    rand_fill(p, 200 + i * 40 + j as u64);
                }
            }
            b
        })
        .collect();
    let x = rand_tensor(&[2, 5, 8], 300);
    let mask = KeyMask::new(
        2,
        5,
        vec![true, true, true, false, false, true, true, true, true, true],
    );
    let base = encode(&g, &blocks, &x, Some(&mask)).unwrap();

    // Perturb a masked position's input in row 0.
    let perturbed = x.detached_copy();
    perturbed.update_data(|d| {
        for e in 0..8 {
            d[3 * 8 + e] += 17.0;
        }
    });
    let out = encode(&g, &blocks, &perturbed, Some(&mask)).unwrap();

    for b in 0..2 {
        for t in 0..5 {
            if !mask.keep(b, t) {
                continue;
            }
            for e in 0..8 {
                assert_eq!(
                    base.get(&[b, t, e]).to_bits(),
                    out.get(&[b, t, e]).to_bits(),
                    "unmasked output changed at [{b},{t},{e}]"
                );
            }
        }
    }
}

#[test]
fn encoder_block_gradients_match_finite_differences() {
    let block = EncoderBlock::<f64>::new(8, 2, 16, 0.0);
    let mut params = Vec::new();
    block.collect("b", &mut params);
    for (i, (name, p)) in params.iter().enumerate() {
        if name.ends_with(".gamma") {
            p.update_data(|d| d.fill(1.0));
        } else {
            rand_fill(p, 400 + i as u64);
        }
        p.set_requires_grad(true);
    }
    let x = rand_tensor(&[1, 4, 8], 500);
    let target = rand_tensor(&[1, 4, 8], 501);

    let loss = |g: &Graph<f64>| {
        let out = block.forward(g, &x, None)?;
        g.mean(&g.mul(&out, &target)?)
    };
    // 10 random coordinates with non-vanishing gradient.
    let samples = sample_active_coordinates(loss, &params, 10, 1e-4, 42).unwrap();
    let err = finite_diff_check_params(loss, &params, &samples, 1e-5).unwrap();
    assert!(err <= 1e-6, "encoder block fd error {err}");
}
