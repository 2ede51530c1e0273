//! Image → coarse-stage token sequence: resample, split into patches,
//! project, add positions, then append keypoint and quality queries.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::image::{patchify, resample, ImageTensor};
use crate::params::{normal, xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Coarse,
    Fine,
}

/// Grid cell covered by one visual token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub granularity: Granularity,
}

impl Region {
    /// `(y, x, height, width)` in original-image pixels.
    pub fn pixel_rect(&self, cfg: &ModelConfig) -> (f64, f64, f64, f64) {
        let s = match self.granularity {
            Granularity::Coarse => cfg.coarse_scale,
            Granularity::Fine => cfg.fine_scale,
        };
        let h = cfg.patch_h as f64 / s;
        let w = cfg.patch_w as f64 / s;
        (self.row as f64 * h, self.col as f64 * w, h, w)
    }
}

/// Token layout is `[visual..., keypoint..., quality?]`, all rows of `tokens`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub n_visual: usize,
    pub n_keypoints: usize,
    pub has_quality: bool,
    /// One entry per visual token, in token order.
    pub region_map: Vec<Region>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.n_visual + self.n_keypoints + usize::from(self.has_quality)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual(&self, g: &mut Graph) -> Result<Var> {
        g.slice_rows(self.tokens, 0, self.n_visual)
    }

    pub fn keypoints(&self, g: &mut Graph) -> Result<Var> {
        g.slice_rows(self.tokens, self.n_visual, self.n_keypoints)
    }

    pub fn quality(&self, g: &mut Graph) -> Result<Option<Var>> {
        if !self.has_quality {
            return Ok(None);
        }
        g.slice_rows(self.tokens, self.n_visual + self.n_keypoints, 1)
            .map(Some)
    }

    /// Same layout with new token values (e.g. an encoder output).
    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self {
            tokens,
            ..self.clone()
        }
    }
}

/// Row-major regions of a full grid.
pub fn grid_regions(rows: usize, cols: usize, granularity: Granularity) -> Vec<Region> {
    (0..rows)
        .flat_map(|row| {
            (0..cols).map(move |col| Region {
                row,
                col,
                granularity,
            })
        })
        .collect()
}

/// Learnable input embeddings. The keypoint and quality queries are shared by
/// both stages.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos_coarse: ParamId,
    pub pos_fine: ParamId,
    pub keypoint: ParamId,
    pub quality: ParamId,
}

impl PatchEmbedder {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        Self {
            proj_w: store.add("embed.proj.w", xavier(rng, cfg.patch_dim(), d)),
            proj_b: store.add("embed.proj.b", Tensor::zeros(&[d])),
            pos_coarse: store.add("embed.pos_coarse", sincos_table(cfg, Granularity::Coarse)),
            pos_fine: store.add("embed.pos_fine", sincos_table(cfg, Granularity::Fine)),
            keypoint: store.add("embed.keypoint", normal(rng, &[cfg.keypoints, d], 0.02)),
            quality: store.add("embed.quality", normal(rng, &[1, d], 0.02)),
        }
    }

    /// Projects every patch of `img` resampled by `scale` and adds the
    /// positional table `pos`. Returns `[N × D]`.
    pub fn embed_grid(
        &self,
        g: &mut Graph,
        img: &ImageTensor,
        cfg: &ModelConfig,
        scale: f64,
        pos: ParamId,
    ) -> Result<Var> {
        let resampled = resample(img, scale)?;
        let patches = patchify(&resampled, cfg.patch_h, cfg.patch_w)?;
        let x = g.constant(patches)?;
        let w = g.param(self.proj_w);
        let b = g.param(self.proj_b);
        let v = g.linear(x, w, b)?;
        let p = g.param(pos);
        g.add(v, p)
    }
}

/// 2D sine-cosine table over patch centers, `[N × D]`. Both grids are measured
/// in fine-patch units, so a coarse patch and its children share a frame.
/// Used as the initial value of the (learnable) positional tables.
pub fn sincos_table(cfg: &ModelConfig, granularity: Granularity) -> Tensor {
    let (rows, cols, step) = match granularity {
        Granularity::Coarse => {
            let (r, c) = cfg.coarse_grid();
            (r, c, cfg.scale_ratio() as f64)
        }
        Granularity::Fine => {
            let (r, c) = cfg.fine_grid();
            (r, c, 1.0)
        }
    };
    let d = cfg.dim;
    let bands = (d / 4).max(1);
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            let y = (r as f64 + 0.5) * step - 0.5;
            let x = (c as f64 + 0.5) * step - 0.5;
            let mut row = Vec::with_capacity(d);
            for k in 0..bands {
                let w = 1.0 / 100f64.powf(k as f64 / bands as f64);
                row.extend_from_slice(&[
                    (y * w).sin(),
                    (y * w).cos(),
                    (x * w).sin(),
                    (x * w).cos(),
                ]);
            }
            row.resize(d, 0.0);
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(vec![rows * cols, d], data).expect("shape matches")
}

pub(crate) fn check_image(img: &ImageTensor, cfg: &ModelConfig) -> Result<()> {
    if (img.height, img.width, img.channels) != (cfg.height, cfg.width, cfg.channels) {
        return Err(shape_err(
            "image",
            format!(
                "expected {}x{}x{}, got {}x{}x{}",
                cfg.height, cfg.width, cfg.channels, img.height, img.width, img.channels
            ),
        ));
    }
    Ok(())
}

/// Builds `[v_1..v_Nc; k_1..k_M; q]` for the coarse stage. `img` holds raw
/// `[0, 1]` pixels; channel normalization happens here.
pub fn assemble_coarse_sequence(
    g: &mut Graph,
    img: &ImageTensor,
    embedder: &PatchEmbedder,
    cfg: &ModelConfig,
) -> Result<TokenSequence> {
    check_image(img, cfg)?;
    let norm = img.normalized(cfg.pixel_mean, cfg.pixel_std);
    let visual = embedder.embed_grid(g, &norm, cfg, cfg.coarse_scale, embedder.pos_coarse)?;
    let kp = g.param(embedder.keypoint);
    let q = g.param(embedder.quality);
    let tokens = g.concat_rows(&[visual, kp, q])?;
    let (rows, cols) = cfg.coarse_grid();
    Ok(TokenSequence {
        tokens,
        n_visual: rows * cols,
        n_keypoints: cfg.keypoints,
        has_quality: true,
        region_map: grid_regions(rows, cols, Granularity::Coarse),
    })
}
