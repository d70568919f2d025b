//! Transformer building blocks: embeddings, multi-head attention, encoder
//! blocks, and the bidirectional cross-modal block.
//!
//! Residual wiring is post-layer-norm (BERT style) throughout: sublayer,
//! add, then norm. Position embeddings are learned absolute tables.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, IdMatrix, KeyMask, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b`, weight stored `[in, out]`.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn forward(&self, g: &Graph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        g.add(&g.matmul(x, &self.weight)?, &self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::zeros(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, g: &Graph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        g.layer_norm(x, &self.gamma, &self.beta, S::from_f64_lossy(LAYER_NORM_EPS))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Scaled dot-product multi-head attention with optional key masking.
/// Masked key positions receive exactly zero attention weight.
pub struct MultiHeadAttention<S: Scalar> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub heads: usize,
    pub dim: usize,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "model dim must be divisible by head count");
        MultiHeadAttention {
            wq: Linear::new(dim, dim),
            wk: Linear::new(dim, dim),
            wv: Linear::new(dim, dim),
            wo: Linear::new(dim, dim),
            heads,
            dim,
        }
    }

    /// Attention without the output projection: `softmax(QK^T / sqrt(d)) V`,
    /// heads re-merged. `queries` is `[B, Tq, D]`, `keys_values` `[B, Tk, D]`.
    pub fn attend(
        &self,
        g: &Graph<S>,
        queries: &Tensor<S>,
        keys_values: &Tensor<S>,
        mask: Option<&KeyMask>,
    ) -> Result<Tensor<S>> {
        let (batch, t_q, dim) = dims3(queries)?;
        let (_, t_k, _) = dims3(keys_values)?;
        if let Some(m) = mask {
            if m.batch != batch || m.len != t_k {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    expected: format!("mask [{batch}, {t_k}]"),
                    actual: format!("mask [{}, {}]", m.batch, m.len),
                });
            }
        }
        let head_dim = dim / self.heads;

        let split = |x: &Tensor<S>, t: usize| -> Result<Tensor<S>> {
            let x = g.reshape(x, &[batch, t, self.heads, head_dim])?;
            g.permute(&x, &[0, 2, 1, 3]) // [B, H, T, d]
        };
        let q = split(&self.wq.forward(g, queries)?, t_q)?;
        let k = split(&self.wk.forward(g, keys_values)?, t_k)?;
        let v = split(&self.wv.forward(g, keys_values)?, t_k)?;

        let k_t = g.permute(&k, &[0, 1, 3, 2])?; // [B, H, d, Tk]
        let scale = S::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
        let scores = g.scale(&g.matmul(&q, &k_t)?, scale)?; // [B, H, Tq, Tk]
        let weights = match mask {
            Some(m) => g.masked_softmax(&scores, m)?,
            None => g.softmax(&scores)?,
        };
        let context = g.matmul(&weights, &v)?; // [B, H, Tq, d]
        let merged = g.permute(&context, &[0, 2, 1, 3])?;
        g.reshape(&merged, &[batch, t_q, dim])
    }

    pub fn forward(
        &self,
        g: &Graph<S>,
        queries: &Tensor<S>,
        keys_values: &Tensor<S>,
        mask: Option<&KeyMask>,
    ) -> Result<Tensor<S>> {
        let context = self.attend(g, queries, keys_values, mask)?;
        self.wo.forward(g, &context)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

/// Position-wise feed-forward: `D -> I -> D` with GELU.
pub struct FeedForward<S: Scalar> {
    pub w1: Linear<S>,
    pub w2: Linear<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn new(dim: usize, intermediate: usize) -> Self {
        FeedForward {
            w1: Linear::new(dim, intermediate),
            w2: Linear::new(intermediate, dim),
        }
    }

    pub fn forward(&self, g: &Graph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.w2.forward(g, &g.gelu(&self.w1.forward(g, x)?)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.w1.collect(&format!("{prefix}.w1"), out);
        self.w2.collect(&format!("{prefix}.w2"), out);
    }
}

pub struct EncoderBlock<S: Scalar> {
    pub attn: MultiHeadAttention<S>,
    pub ffn: FeedForward<S>,
    pub ln1: LayerNorm<S>,
    pub ln2: LayerNorm<S>,
    pub dropout: f64,
}

impl<S: Scalar> EncoderBlock<S> {
    pub fn new(dim: usize, heads: usize, intermediate: usize, dropout: f64) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::new(dim, heads),
            ffn: FeedForward::new(dim, intermediate),
            ln1: LayerNorm::new(dim),
            ln2: LayerNorm::new(dim),
            dropout,
        }
    }

    pub fn forward(&self, g: &Graph<S>, x: &Tensor<S>, mask: Option<&KeyMask>) -> Result<Tensor<S>> {
        let attn_out = self.attn.forward(g, x, x, mask)?;
        let x = self.ln1.forward(g, &g.add(x, &g.dropout(&attn_out, self.dropout)?)?)?;
        let ffn_out = self.ffn.forward(g, &x)?;
        self.ln2.forward(g, &g.add(&x, &g.dropout(&ffn_out, self.dropout)?)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
    }
}

/// Apply encoder blocks in order. Zero blocks is the identity.
pub fn encode<S: Scalar>(
    g: &Graph<S>,
    blocks: &[EncoderBlock<S>],
    states: &Tensor<S>,
    mask: Option<&KeyMask>,
) -> Result<Tensor<S>> {
    let mut x = states.clone();
    for block in blocks {
        x = block.forward(g, &x, mask)?;
    }
    Ok(x)
}

/// BERT-style text embedding: token + position + token-type tables at the
/// embedding width `E`, layer norm, dropout, then an input projection to
/// the hidden width `D` when `E != D`.
pub struct TextEmbedding<S: Scalar> {
    pub token_table: Tensor<S>,      // [V, E]
    pub position_table: Tensor<S>,   // [L_max, E]
    pub token_type_table: Tensor<S>, // [2, E]
    pub input_projection: Option<Linear<S>>,
    pub ln: LayerNorm<S>,
    pub dropout: f64,
}

impl<S: Scalar> TextEmbedding<S> {
    pub fn new(vocab: usize, max_len: usize, embed: usize, hidden: usize, dropout: f64) -> Self {
        TextEmbedding {
            token_table: Tensor::zeros(&[vocab, embed]),
            position_table: Tensor::zeros(&[max_len, embed]),
            token_type_table: Tensor::zeros(&[2, embed]),
            input_projection: (embed != hidden).then(|| Linear::new(embed, hidden)),
            ln: LayerNorm::new(embed),
            dropout,
        }
    }

    /// Embed token ids with token type `type_id`. Output is `[B, T, D]`.
    pub fn forward(&self, g: &Graph<S>, ids: &IdMatrix, type_id: usize) -> Result<Tensor<S>> {
        let max_len = self.position_table.shape()[0];
        if ids.len > max_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds position table length {max_len}",
                ids.len
            )));
        }
        let tok = g.embedding(&self.token_table, ids)?; // [B, T, E]
        let pos = g.slice(&self.position_table, 0, 0, ids.len)?; // [T, E]
        let embed = self.token_table.shape()[1];
        let typ = g.reshape(&g.slice(&self.token_type_table, 0, type_id, 1)?, &[embed])?;
        let x = g.add(&g.add(&tok, &pos)?, &typ)?;
        let x = self.ln.forward(g, &x)?;
        let x = g.dropout(&x, self.dropout)?;
        match &self.input_projection {
            Some(proj) => proj.forward(g, &x),
            None => Ok(x),
        }
    }

    /// The type-1 ("image") row, projected to the hidden width. One-tower
    /// models add this to patch tokens so modality is carried by embeddings.
    pub fn image_type_vector(&self, g: &Graph<S>) -> Result<Tensor<S>> {
        let embed = self.token_table.shape()[1];
        let typ = g.reshape(&g.slice(&self.token_type_table, 0, 1, 1)?, &[1, embed])?;
        let projected = match &self.input_projection {
            Some(proj) => proj.forward(g, &typ)?,
            None => typ,
        };
        let hidden = *projected.shape().last().unwrap();
        g.reshape(&projected, &[hidden])
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.token_table"), self.token_table.clone()));
        out.push((format!("{prefix}.position_table"), self.position_table.clone()));
        out.push((format!("{prefix}.token_type_table"), self.token_type_table.clone()));
        if let Some(proj) = &self.input_projection {
            proj.collect(&format!("{prefix}.input_projection"), out);
        }
        self.ln.collect(&format!("{prefix}.layer_norm"), out);
    }
}

/// Split an image into non-overlapping `P x P` patches, flatten each in
/// (row, col, channel) order, project, prepend a learned CLS vector, add
/// positions, and layer-norm.
pub struct PatchEmbedding<S: Scalar> {
    pub patch: usize,
    pub channels: usize,
    pub projection: Linear<S>, // [P*P*C, D]
    pub cls_token: Tensor<S>,  // [D]
    pub position_table: Tensor<S>, // [N+1, D]
    pub ln: LayerNorm<S>,
}

impl<S: Scalar> PatchEmbedding<S> {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize, hidden: usize) -> Result<Self> {
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::PatchGeometry {
                h: height,
                w: width,
                patch,
            });
        }
        let n = (height / patch) * (width / patch);
        Ok(PatchEmbedding {
            patch,
            channels,
            projection: Linear::new(patch * patch * channels, hidden),
            cls_token: Tensor::zeros(&[hidden]),
            position_table: Tensor::zeros(&[n + 1, hidden]),
            ln: LayerNorm::new(hidden),
        })
    }

    /// `[B, H, W, C]` image into `[B, N, P*P*C]` flattened patches, patches
    /// ordered row-major over the patch grid. Pure data movement; gradients
    /// never flow into raw images.
    pub fn patchify(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                expected: format!("[B, H, W, {}]", self.channels),
                actual: crate::error::shape_str(shape),
            });
        }
        let (batch, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::PatchGeometry { h, w, patch: p });
        }
        let (rows, cols) = (h / p, w / p);
        let data = image.data();
        let mut out = Vec::with_capacity(batch * rows * cols * p * p * c);
        for b in 0..batch {
            for pr in 0..rows {
                for pc in 0..cols {
                    for r in 0..p {
                        for col in 0..p {
                            let base = ((b * h + pr * p + r) * w + pc * p + col) * c;
                            out.extend_from_slice(&data[base..base + c]);
                        }
                    }
                }
            }
        }
        Tensor::from_vec(vec![batch, rows * cols, p * p * c], out)
    }

    pub fn forward(&self, g: &Graph<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
        let patches = self.patchify(image)?;
        let n = patches.shape()[1];
        if n + 1 != self.position_table.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                expected: format!("{} patch tokens", self.position_table.shape()[0] - 1),
                actual: format!("{n}"),
            });
        }
        let batch = patches.shape()[0];
        let hidden = self.cls_token.shape()[0];
        let projected = self.projection.forward(g, &patches)?; // [B, N, D]
        let cls = g.add(&Tensor::zeros(&[batch, 1, hidden]), &self.cls_token)?;
        let seq = g.concat(&[&cls, &projected], 1)?; // [B, N+1, D]
        let seq = g.add(&seq, &self.position_table)?;
        self.ln.forward(g, &seq)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.projection.collect(&format!("{prefix}.projection"), out);
        out.push((format!("{prefix}.cls_token"), self.cls_token.clone()));
        out.push((format!("{prefix}.position_table"), self.position_table.clone()));
        self.ln.collect(&format!("{prefix}.layer_norm"), out);
    }
}

/// Bidirectional cross-modal block, LXMERT-style: one shared cross-attention
/// applied in both directions from the block's entering states, then
/// per-stream self-attention, then per-stream feed-forward, each with
/// add-and-norm.
pub struct CrossModalBlock<S: Scalar> {
    pub cross_attn: MultiHeadAttention<S>,
    pub text_self: MultiHeadAttention<S>,
    pub vision_self: MultiHeadAttention<S>,
    pub text_ffn: FeedForward<S>,
    pub vision_ffn: FeedForward<S>,
    pub text_ln_cross: LayerNorm<S>,
    pub text_ln_self: LayerNorm<S>,
    pub text_ln_ffn: LayerNorm<S>,
    pub vision_ln_cross: LayerNorm<S>,
    pub vision_ln_self: LayerNorm<S>,
    pub vision_ln_ffn: LayerNorm<S>,
    pub dropout: f64,
}

impl<S: Scalar> CrossModalBlock<S> {
    pub fn new(dim: usize, heads: usize, intermediate: usize, dropout: f64) -> Self {
        CrossModalBlock {
            cross_attn: MultiHeadAttention::new(dim, heads),
            text_self: MultiHeadAttention::new(dim, heads),
            vision_self: MultiHeadAttention::new(dim, heads),
            text_ffn: FeedForward::new(dim, intermediate),
            vision_ffn: FeedForward::new(dim, intermediate),
            text_ln_cross: LayerNorm::new(dim),
            text_ln_self: LayerNorm::new(dim),
            text_ln_ffn: LayerNorm::new(dim),
            vision_ln_cross: LayerNorm::new(dim),
            vision_ln_self: LayerNorm::new(dim),
            vision_ln_ffn: LayerNorm::new(dim),
            dropout,
        }
    }

    pub fn forward(
        &self,
        g: &Graph<S>,
        text: &Tensor<S>,
        vision: &Tensor<S>,
        text_mask: Option<&KeyMask>,
        vision_mask: Option<&KeyMask>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        // Both cross-attentions read the entering states, simultaneously.
        let text_cross = self.cross_attn.forward(g, text, vision, vision_mask)?;
        let vision_cross = self.cross_attn.forward(g, vision, text, text_mask)?;
        let text = self
            .text_ln_cross
            .forward(g, &g.add(text, &g.dropout(&text_cross, self.dropout)?)?)?;
        let vision = self
            .vision_ln_cross
            .forward(g, &g.add(vision, &g.dropout(&vision_cross, self.dropout)?)?)?;

        let text_sa = self.text_self.forward(g, &text, &text, text_mask)?;
        let text = self
            .text_ln_self
            .forward(g, &g.add(&text, &g.dropout(&text_sa, self.dropout)?)?)?;
        let vision_sa = self.vision_self.forward(g, &vision, &vision, vision_mask)?;
        let vision = self
            .vision_ln_self
            .forward(g, &g.add(&vision, &g.dropout(&vision_sa, self.dropout)?)?)?;

        let text_ff = self.text_ffn.forward(g, &text)?;
        let text = self
            .text_ln_ffn
            .forward(g, &g.add(&text, &g.dropout(&text_ff, self.dropout)?)?)?;
        let vision_ff = self.vision_ffn.forward(g, &vision)?;
        let vision = self
            .vision_ln_ffn
            .forward(g, &g.add(&vision, &g.dropout(&vision_ff, self.dropout)?)?)?;

        Ok((text, vision))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.text_self.collect(&format!("{prefix}.text_self"), out);
        self.vision_self.collect(&format!("{prefix}.vision_self"), out);
        self.text_ffn.collect(&format!("{prefix}.text_ffn"), out);
        self.vision_ffn.collect(&format!("{prefix}.vision_ffn"), out);
        self.text_ln_cross.collect(&format!("{prefix}.text_ln_cross"), out);
        self.text_ln_self.collect(&format!("{prefix}.text_ln_self"), out);
        self.text_ln_ffn.collect(&format!("{prefix}.text_ln_ffn"), out);
        self.vision_ln_cross.collect(&format!("{prefix}.vision_ln_cross"), out);
        self.vision_ln_self.collect(&format!("{prefix}.vision_ln_self"), out);
        self.vision_ln_ffn.collect(&format!("{prefix}.vision_ln_ffn"), out);
    }
}

fn dims3<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "attention",
            expected: "[batch, seq, dim]".into(),
            actual: crate::error::shape_str(x.shape()),
        });
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Classification head: one linear layer, or two with a GELU between.
pub struct ClassifierHead<S: Scalar> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn new(in_dim: usize, hidden: Option<usize>, classes: usize) -> Self {
        let layers = match hidden {
            Some(h) => vec![Linear::new(in_dim, h), Linear::new(h, classes)],
            None => vec![Linear::new(in_dim, classes)],
        };
        ClassifierHead { layers }
    }

    pub fn forward(&self, g: &Graph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = self.layers[0].forward(g, x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(g, &g.gelu(&h)?)?;
        }
        Ok(h)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.layer{i}"), out);
        }
    }
}
