//! Shared keypoint decoder, quality predictor and early-exit gate.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::encoder::LN_EPS;
use crate::error::{shape_err, Error, Result};
use crate::image::{write_pgm16, Quantization};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }
}

/// `M` heatmaps of `rows × cols`, one per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    /// `[M × rows × cols]`.
    pub maps: Tensor,
    pub stage: Stage,
    /// Input image `(height, width)` the maps refer to.
    pub source: (usize, usize),
}

impl HeatmapSet {
    pub fn new(maps: Tensor, stage: Stage, source: (usize, usize)) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(shape_err("HeatmapSet", format!("{:?}", maps.shape())));
        }
        Ok(Self {
            maps,
            stage,
            source,
        })
    }

    pub fn count(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn map(&self, i: usize) -> &[f64] {
        let n = self.rows() * self.cols();
        &self.maps.data()[i * n..(i + 1) * n]
    }

    /// Writes `{prefix}_{i:02}.pgm` for every map as 16-bit min-max normalized PGM.
    pub fn export_pgm(&self, dir: &Path, prefix: &str) -> Result<Vec<(PathBuf, Quantization)>> {
        (0..self.count())
            .map(|i| {
                let p = dir.join(format!("{prefix}_{i:02}.pgm"));
                let q = write_pgm16(&p, self.rows(), self.cols(), self.map(i))?;
                Ok((p, q))
            })
            .collect()
    }

    /// Per-cell maximum over all keypoints, for single-image summaries.
    pub fn max_projection(&self) -> Vec<f64> {
        let n = self.rows() * self.cols();
        let mut out = vec![f64::NEG_INFINITY; n];
        for i in 0..self.count() {
            for (o, v) in out.iter_mut().zip(self.map(i)) {
                *o = o.max(*v);
            }
        }
        out
    }
}

/// LayerNorm then one linear map `D → Ĥ·Ŵ`, shared across keypoints and stages.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

impl DecoderParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let n = cfg.heatmap_len();
        Self {
            ln_g: store.add("decoder.ln.g", Tensor::ones(&[d])),
            ln_b: store.add("decoder.ln.b", Tensor::zeros(&[d])),
            w: store.add("decoder.w", xavier(rng, d, n)),
            b: store.add("decoder.b", Tensor::zeros(&[n])),
        }
    }
}

/// Decodes `[M × D]` keypoint tokens to `[M × Ĥ·Ŵ]` heatmap rows.
pub fn decode_heatmaps(g: &mut Graph, keypoint_tokens: Var, params: &DecoderParams) -> Result<Var> {
    let d = g.params().get(params.ln_g).len();
    if g.shape(keypoint_tokens).len() != 2 || g.shape(keypoint_tokens)[1] != d {
        return Err(shape_err(
            "decode_heatmaps",
            format!("tokens {:?}, dim {d}", g.shape(keypoint_tokens)),
        ));
    }
    let (lg, lb) = (g.param(params.ln_g), g.param(params.ln_b));
    let h = g.layer_norm(keypoint_tokens, lg, lb, LN_EPS)?;
    let (w, b) = (g.param(params.w), g.param(params.b));
    g.linear(h, w, b)
}

/// Reads decoded rows back as a [`HeatmapSet`].
pub fn heatmap_set(g: &Graph, rows: Var, stage: Stage, cfg: &ModelConfig) -> Result<HeatmapSet> {
    let (h, w) = cfg.heatmap_size();
    let m = g.shape(rows)[0];
    let maps = g.value(rows).clone().reshape(&[m, h, w])?;
    HeatmapSet::new(maps, stage, (cfg.height, cfg.width))
}

/// `D → D/2 → 1` MLP with GELU and a sigmoid output, plus the exit threshold.
#[derive(Debug, Clone)]
pub struct QualityGate {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub threshold: f64,
}

impl QualityGate {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let h = (d / 2).max(1);
        Self {
            fc1_w: store.add("quality.fc1.w", xavier(rng, d, h)),
            fc1_b: store.add("quality.fc1.b", Tensor::zeros(&[h])),
            fc2_w: store.add("quality.fc2.w", xavier(rng, h, 1)),
            fc2_b: store.add("quality.fc2.b", Tensor::zeros(&[1])),
            threshold: cfg.q_thres,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }
}

/// Predicted quality `Q ∈ [0, 1]` from the final quality token `[1 × D]`.
pub fn predict_quality(g: &mut Graph, quality_token: Var, gate: &QualityGate) -> Result<Var> {
    let (w1, b1) = (g.param(gate.fc1_w), g.param(gate.fc1_b));
    let h = g.linear(quality_token, w1, b1)?;
    let h = g.gelu(h)?;
    let (w2, b2) = (g.param(gate.fc2_w), g.param(gate.fc2_b));
    let z = g.linear(h, w2, b2)?;
    g.sigmoid(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    ExitCoarse,
    Refine,
}

/// Refine exactly when `q < q_thres`.
pub fn gate(q: f64, q_thres: f64) -> GateDecision {
    if q < q_thres {
        GateDecision::Refine
    } else {
        GateDecision::ExitCoarse
    }
}

/// Decodes the keypoint tokens found after layer `layer_idx` (1-based, so
/// `layer_idx == K` is the final output).
pub fn intermediate_response(
    g: &mut Graph,
    layer_outputs: &[Var],
    n_visual: usize,
    n_keypoints: usize,
    params: &DecoderParams,
    layer_idx: usize,
    stage: Stage,
    cfg: &ModelConfig,
) -> Result<HeatmapSet> {
    if layer_idx == 0 || layer_idx > layer_outputs.len() {
        return Err(Error::OutOfRange {
            index: layer_idx,
            len: layer_outputs.len(),
        });
    }
    let out = layer_outputs[layer_idx - 1];
    let kp = g.slice_rows(out, n_visual, n_keypoints)?;
    let rows = decode_heatmaps(g, kp, params)?;
    heatmap_set(g, rows, stage, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_boundaries() {
        assert_eq!(gate(0.96, 0.95), GateDecision::ExitCoarse);
        assert_eq!(gate(0.95, 0.95), GateDecision::ExitCoarse);
        assert_eq!(gate(0.2, 0.95), GateDecision::Refine);
        for q in [0.0, 0.3, 1.0] {
            assert_eq!(gate(q, 0.0), GateDecision::ExitCoarse);
        }
        assert_eq!(gate(0.999, 1.0), GateDecision::Refine);
        assert_eq!(gate(1.0, 1.0), GateDecision::ExitCoarse);
    }
}
