//! Fine-stage input: promoted coarse patches are replaced by their fine
//! children (each fused with an MLP of the parent's coarse output), the rest
//! stay as coarse outputs, and the keypoint queries restart from their
//! initial embeddings.

use std::fmt::Write;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::ledger::SelectionResult;
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{check_image, Granularity, PatchEmbedder, Region, TokenSequence};

/// `D → D → D` with GELU, applied to the coarse output of each promoted patch.
#[derive(Debug, Clone)]
pub struct MergeMlp {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl MergeMlp {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        Self {
            fc1_w: store.add("merge.fc1.w", xavier(rng, d, d)),
            fc1_b: store.add("merge.fc1.b", Tensor::zeros(&[d])),
            fc2_w: store.add("merge.fc2.w", xavier(rng, d, d)),
            fc2_b: store.add("merge.fc2.b", Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(self.fc1_w), g.param(self.fc1_b));
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h)?;
        let (w2, b2) = (g.param(self.fc2_w), g.param(self.fc2_b));
        g.linear(h, w2, b2)
    }
}

#[derive(Debug, Clone)]
pub struct FineComposition {
    pub tokens: TokenSequence,
    /// Coarse index each visual token descends from (itself for kept coarse tokens).
    pub parent_map: Vec<usize>,
}

impl FineComposition {
    /// `token,granularity,row,col,parent` rows with a header line.
    pub fn parent_map_csv(&self) -> String {
        let mut out = String::from("token,granularity,row,col,parent\n");
        for (i, (r, p)) in self
            .tokens
            .region_map
            .iter()
            .zip(&self.parent_map)
            .enumerate()
        {
            let gran = match r.granularity {
                Granularity::Coarse => "coarse",
                Granularity::Fine => "fine",
            };
            let _ = writeln!(out, "{i},{gran},{},{},{p}", r.row, r.col);
        }
        out
    }
}

/// Full fine-granularity token grid with fine positional embeddings, `[N_f × D]`.
pub fn fine_grid_embed(
    g: &mut Graph,
    img: &ImageTensor,
    embedder: &PatchEmbedder,
    cfg: &ModelConfig,
) -> Result<Var> {
    check_image(img, cfg)?;
    let norm = img.normalized(cfg.pixel_mean, cfg.pixel_std);
    embedder.embed_grid(g, &norm, cfg, cfg.fine_scale, embedder.pos_fine)
}

/// Row-major fine-grid indices covered by coarse patch `coarse_idx`.
pub fn child_indices(coarse_idx: usize, cfg: &ModelConfig) -> Result<Vec<usize>> {
    let (_, ccols) = cfg.coarse_grid();
    let n_c = cfg.n_coarse();
    if coarse_idx >= n_c {
        return Err(Error::OutOfRange {
            index: coarse_idx,
            len: n_c,
        });
    }
    let r = cfg.scale_ratio();
    let (_, fcols) = cfg.fine_grid();
    let (cr, cc) = (coarse_idx / ccols, coarse_idx % ccols);
    let mut out = Vec::with_capacity(r * r);
    for fr in cr * r..(cr + 1) * r {
        for fc in cc * r..(cc + 1) * r {
            out.push(fr * fcols + fc);
        }
    }
    Ok(out)
}

/// Builds `[kept coarse outputs..., promoted children..., k_1..k_M]`.
pub fn compose_fine_sequence(
    g: &mut Graph,
    coarse_out: &TokenSequence,
    selection: &SelectionResult,
    fine_full: Var,
    embedder: &PatchEmbedder,
    merge: &MergeMlp,
    cfg: &ModelConfig,
) -> Result<FineComposition> {
    let n_c = coarse_out.n_visual;
    let covered = selection.high_idx.len() + selection.low_idx.len();
    let in_range = selection
        .high_idx
        .iter()
        .chain(&selection.low_idx)
        .all(|&i| i < n_c);
    if n_c != cfg.n_coarse() || covered != n_c || !in_range {
        return Err(shape_err(
            "compose_fine_sequence",
            format!(
                "selection of {} + {} indices over {n_c} coarse tokens",
                selection.high_idx.len(),
                selection.low_idx.len()
            ),
        ));
    }
    if g.shape(fine_full) != [cfg.n_fine(), cfg.dim] {
        return Err(shape_err(
            "compose_fine_sequence",
            format!("fine grid {:?}", g.shape(fine_full)),
        ));
    }
    let n_child = cfg.children_per_patch();
    let (_, ccols) = cfg.coarse_grid();
    let (_, fcols) = cfg.fine_grid();

    let visual = coarse_out.visual(g)?;
    let low = g.gather_rows(visual, &selection.low_idx)?;
    let high = g.gather_rows(visual, &selection.high_idx)?;
    let merged = merge.forward(g, high)?;

    let mut expand_idx = Vec::with_capacity(n_child * selection.high_idx.len());
    let mut child_idx = Vec::with_capacity(expand_idx.capacity());
    let mut region_map = Vec::with_capacity(selection.low_idx.len() + expand_idx.capacity());
    let mut parent_map = Vec::with_capacity(region_map.capacity());
    for &j in &selection.low_idx {
        region_map.push(Region {
            row: j / ccols,
            col: j % ccols,
            granularity: Granularity::Coarse,
        });
        parent_map.push(j);
    }
    for (k, &j) in selection.high_idx.iter().enumerate() {
        for c in child_indices(j, cfg)? {
            expand_idx.push(k);
            child_idx.push(c);
            region_map.push(Region {
                row: c / fcols,
                col: c % fcols,
                granularity: Granularity::Fine,
            });
            parent_map.push(j);
        }
    }
    let expanded = g.gather_rows(merged, &expand_idx)?;
    let children = g.gather_rows(fine_full, &child_idx)?;
    let fine = g.add(expanded, children)?;
    let kp = g.param(embedder.keypoint);
    let tokens = g.concat_rows(&[low, fine, kp])?;

    Ok(FineComposition {
        tokens: TokenSequence {
            tokens,
            n_visual: region_map.len(),
            n_keypoints: cfg.keypoints,
            has_quality: false,
            region_map,
        },
        parent_map,
    })
}
