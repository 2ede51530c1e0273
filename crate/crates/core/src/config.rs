//! Architecture and runtime hyperparameters, with the named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keypoints per person in COCO order.
pub const COCO_KEYPOINTS: usize = 17;
/// Heatmaps are a quarter of the input resolution along each axis.
pub const HEATMAP_STRIDE: usize = 4;
/// Tolerance used when checking that scaled sizes are integral.
const INTEGRAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Input scale of the coarse stage.
    pub coarse_scale: f64,
    /// Input scale of the fine stage.
    pub fine_scale: f64,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub keypoints: usize,
    /// Fraction of coarse patches promoted to the fine stage.
    pub alpha: f64,
    /// EMA factor for cross-layer attention accumulation.
    pub beta_ema: f64,
    /// Samples with predicted quality at or above this exit after the coarse stage.
    pub q_thres: f64,
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

fn scaled(len: usize, s: f64) -> Option<usize> {
    let v = len as f64 * s;
    let r = v.round();
    ((v - r).abs() < INTEGRAL_TOL && r >= 1.0).then_some(r as usize)
}

impl ModelConfig {
    pub const PROFILES: [&'static str; 5] =
        ["base-256", "base-384", "small-256", "small-384", "toy"];

    pub fn profile(name: &str) -> Result<Self> {
        let (h, w, dim, heads, alpha) = match name {
            "base-256" => (256, 192, 768, 12, 0.4),
            "base-384" => (384, 288, 768, 12, 0.3),
            "small-256" => (256, 192, 384, 6, 0.5),
            "small-384" => (384, 288, 384, 6, 0.5),
            "toy" => return Ok(Self::toy()),
            other => return Err(Error::Config(format!("unknown profile `{other}`"))),
        };
        Ok(Self {
            height: h,
            width: w,
            channels: 3,
            patch_h: 16,
            patch_w: 16,
            coarse_scale: 0.5,
            fine_scale: 1.0,
            dim,
            depth: 12,
            heads,
            keypoints: COCO_KEYPOINTS,
            alpha,
            beta_ema: 0.99,
            q_thres: 0.95,
            pixel_mean: 0.5,
            pixel_std: 0.5,
        })
    }

    /// Desk-scale preset: 64×48 input, 8×8 patches, D = 64, four layers.
    pub fn toy() -> Self {
        Self {
            height: 64,
            width: 48,
            channels: 3,
            patch_h: 8,
            patch_w: 8,
            coarse_scale: 0.5,
            fine_scale: 1.0,
            dim: 64,
            depth: 4,
            heads: 4,
            keypoints: COCO_KEYPOINTS,
            alpha: 0.5,
            beta_ema: 0.99,
            q_thres: 0.95,
            pixel_mean: 0.5,
            pixel_std: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return bad("channels and patch sizes must be positive".into());
        }
        for (name, s) in [("coarse", self.coarse_scale), ("fine", self.fine_scale)] {
            let (Some(h), Some(w)) = (scaled(self.height, s), scaled(self.width, s)) else {
                return bad(format!("{name} scale {s} gives non-integral size"));
            };
            if h % self.patch_h != 0 || w % self.patch_w != 0 {
                return bad(format!(
                    "{name} input {h}x{w} not divisible by patch {}x{}",
                    self.patch_h, self.patch_w
                ));
            }
        }
        let ratio = self.fine_scale / self.coarse_scale;
        if ratio < 1.0 - INTEGRAL_TOL || (ratio - ratio.round()).abs() > INTEGRAL_TOL {
            return bad(format!(
                "fine/coarse scale ratio {ratio} is not a positive integer"
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.q_thres) {
            return bad(format!("q_thres {} outside [0, 1]", self.q_thres));
        }
        if !(0.0..1.0).contains(&self.beta_ema) {
            return bad(format!("beta_ema {} outside [0, 1)", self.beta_ema));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.dim < 2 || self.depth == 0 || self.keypoints == 0 {
            return bad("dim >= 2, depth >= 1 and keypoints >= 1 required".into());
        }
        if !self.height.is_multiple_of(HEATMAP_STRIDE) || !self.width.is_multiple_of(HEATMAP_STRIDE) {
            return bad(format!("input size must be divisible by {HEATMAP_STRIDE}"));
        }
        if self.pixel_std <= 0.0 {
            return bad("pixel_std must be positive".into());
        }
        Ok(())
    }

    fn grid(&self, s: f64) -> (usize, usize) {
        let h = scaled(self.height, s).unwrap_or(0);
        let w = scaled(self.width, s).unwrap_or(0);
        (h / self.patch_h, w / self.patch_w)
    }

    /// Coarse patch grid as `(rows, cols)`.
    pub fn coarse_grid(&self) -> (usize, usize) {
        self.grid(self.coarse_scale)
    }

    pub fn fine_grid(&self) -> (usize, usize) {
        self.grid(self.fine_scale)
    }

    pub fn n_coarse(&self) -> usize {
        let (r, c) = self.coarse_grid();
        r * c
    }

    pub fn n_fine(&self) -> usize {
        let (r, c) = self.fine_grid();
        r * c
    }

    /// Integer ratio `s_f / s_c`: each coarse patch spans `ratio × ratio` fine patches.
    pub fn scale_ratio(&self) -> usize {
        (self.fine_scale / self.coarse_scale).round() as usize
    }

    /// Fine tokens per promoted coarse patch, `(s_f / s_c)²`.
    pub fn children_per_patch(&self) -> usize {
        self.scale_ratio().pow(2)
    }

    pub fn n_high(&self) -> usize {
        n_high(self.alpha, self.n_coarse())
    }

    /// Fine-stage visual tokens: every promoted patch contributes its children,
    /// every other patch stays a single coarse token.
    pub fn n_fine_tokens(&self) -> usize {
        let nh = self.n_high();
        self.children_per_patch() * nh + (self.n_coarse() - nh)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Heatmap `(rows, cols)`.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.height / HEATMAP_STRIDE, self.width / HEATMAP_STRIDE)
    }

    pub fn heatmap_len(&self) -> usize {
        let (h, w) = self.heatmap_size();
        h * w
    }

    pub fn coarse_tokens(&self) -> usize {
        self.n_coarse() + self.keypoints + 1
    }

    pub fn fine_stage_tokens(&self) -> usize {
        self.n_fine_tokens() + self.keypoints
    }
}

/// `floor(alpha · n)`, robust to representation error in `alpha`.
pub fn n_high(alpha: f64, n: usize) -> usize {
    (alpha * n as f64 + INTEGRAL_TOL).floor() as usize
}
