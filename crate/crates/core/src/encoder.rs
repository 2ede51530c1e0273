//! Pre-norm transformer encoder shared by the coarse and fine stages.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<BlockParams>,
    pub heads: usize,
    pub dim: usize,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self::init_with(store, cfg.dim, cfg.depth, cfg.heads, rng)
    }

    pub fn init_with(
        store: &mut ParamStore,
        dim: usize,
        depth: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = dim;
        let layers = (0..depth)
            .map(|l| {
                let p = |s: &str| format!("encoder.{l}.{s}");
                BlockParams {
                    ln1_g: store.add(p("ln1.g"), Tensor::ones(&[d])),
                    ln1_b: store.add(p("ln1.b"), Tensor::zeros(&[d])),
                    qkv_w: store.add(p("qkv.w"), xavier(rng, d, 3 * d)),
                    qkv_b: store.add(p("qkv.b"), Tensor::zeros(&[3 * d])),
                    proj_w: store.add(p("proj.w"), xavier(rng, d, d)),
                    proj_b: store.add(p("proj.b"), Tensor::zeros(&[d])),
                    ln2_g: store.add(p("ln2.g"), Tensor::ones(&[d])),
                    ln2_b: store.add(p("ln2.b"), Tensor::zeros(&[d])),
                    fc1_w: store.add(p("fc1.w"), xavier(rng, d, 4 * d)),
                    fc1_b: store.add(p("fc1.b"), Tensor::zeros(&[4 * d])),
                    fc2_w: store.add(p("fc2.w"), xavier(rng, 4 * d, d)),
                    fc2_b: store.add(p("fc2.b"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        Self {
            layers,
            heads,
            dim: d,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Post-softmax attention of one layer, `[heads × N × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub weights: Tensor,
}

impl LayerAttention {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub sequence: TokenSequence,
    /// Filled only when recording was requested.
    pub attentions: Vec<LayerAttention>,
    /// Output tokens after each layer, `layer_outputs[K-1] == sequence.tokens`.
    pub layer_outputs: Vec<Var>,
}

fn block(
    g: &mut Graph,
    x: Var,
    p: &BlockParams,
    heads: usize,
    attn_out: Option<&mut Vec<LayerAttention>>,
) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let (g1, b1) = (g.param(p.ln1_g), g.param(p.ln1_b));
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let (wq, bq) = (g.param(p.qkv_w), g.param(p.qkv_b));
    let qkv = g.linear(h, wq, bq)?;

    let mut outs = Vec::with_capacity(heads);
    let mut weights = attn_out.as_ref().map(|_| Vec::with_capacity(heads * n * n));
    for i in 0..heads {
        let q = g.slice_cols(qkv, i * hd, hd)?;
        let k = g.slice_cols(qkv, d + i * hd, hd)?;
        let v = g.slice_cols(qkv, 2 * d + i * hd, hd)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows(s)?;
        if let Some(w) = weights.as_mut() {
            w.extend_from_slice(g.value(a).data());
        }
        outs.push(g.matmul(a, v)?);
    }
    if let (Some(dst), Some(w)) = (attn_out, weights) {
        dst.push(LayerAttention {
            weights: Tensor::new(vec![heads, n, n], w)?,
        });
    }
    let o = g.concat_cols(&outs)?;
    let (wp, bp) = (g.param(p.proj_w), g.param(p.proj_b));
    let o = g.linear(o, wp, bp)?;
    let x = g.add(x, o)?;

    let (g2, b2) = (g.param(p.ln2_g), g.param(p.ln2_b));
    let h = g.layer_norm(x, g2, b2, LN_EPS)?;
    let (w1, c1) = (g.param(p.fc1_w), g.param(p.fc1_b));
    let h = g.linear(h, w1, c1)?;
    let h = g.gelu(h)?;
    let (w2, c2) = (g.param(p.fc2_w), g.param(p.fc2_b));
    let h = g.linear(h, w2, c2)?;
    g.add(x, h)
}

/// Runs all layers over `x`. Output has the same length and layout.
pub fn encode(
    g: &mut Graph,
    x: &TokenSequence,
    params: &EncoderParams,
    record: bool,
) -> Result<EncoderOutput> {
    let shape = g.shape(x.tokens).to_vec();
    if shape.len() != 2 || shape[1] != params.dim || shape[0] != x.len() {
        return Err(shape_err(
            "encode",
            format!("tokens {shape:?}, expected [{} x {}]", x.len(), params.dim),
        ));
    }
    let mut attentions = Vec::new();
    let mut layer_outputs = Vec::with_capacity(params.depth());
    let mut h = x.tokens;
    for p in &params.layers {
        h = block(g, h, p, params.heads, record.then_some(&mut attentions))?;
        layer_outputs.push(h);
    }
    Ok(EncoderOutput {
        sequence: x.with_tokens(h),
        attentions,
        layer_outputs,
    })
}

/// Keypoint-query rows against visual-token columns, `[heads × M × N_v]`.
/// The quality column (if any) is excluded by construction.
pub fn keypoint_attention_slice(
    attn: &LayerAttention,
    n_visual: usize,
    n_keypoints: usize,
) -> Result<Tensor> {
    let (h, n) = (attn.heads(), attn.tokens());
    if n_visual + n_keypoints > n {
        return Err(shape_err(
            "keypoint_attention_slice",
            format!("{n_visual} visual + {n_keypoints} keypoints > {n} tokens"),
        ));
    }
    let w = attn.weights.data();
    let mut out = Vec::with_capacity(h * n_keypoints * n_visual);
    for head in 0..h {
        for i in 0..n_keypoints {
            let row = (head * n + n_visual + i) * n;
            out.extend_from_slice(&w[row..row + n_visual]);
        }
    }
    Tensor::new(vec![h, n_keypoints, n_visual], out)
}
