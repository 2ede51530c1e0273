//! The full two-stage model: parameters plus the coarse, fine and gated
//! inference paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::composer::{compose_fine_sequence, fine_grid_embed, FineComposition, MergeMlp};
use crate::config::ModelConfig;
use crate::decoder::{
    decode_heatmaps, gate, heatmap_set, predict_quality, DecoderParams, GateDecision, HeatmapSet,
    QualityGate, Stage,
};
use crate::encoder::{encode, keypoint_attention_slice, EncoderOutput, EncoderParams};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::ledger::{accumulate_and_select, SelectionResult};
use crate::metrics::{decode_keypoints, PoseEstimate};
use crate::params::ParamStore;
use crate::tokenizer::{assemble_coarse_sequence, PatchEmbedder};

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embedder: PatchEmbedder,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub quality: QualityGate,
    pub merge: MergeMlp,
}

/// Graph handles for one coarse pass.
#[derive(Debug, Clone)]
pub struct CoarsePass {
    pub encoded: EncoderOutput,
    /// `[M × Ĥ·Ŵ]`.
    pub heatmaps: Var,
    /// `[1 × 1]`.
    pub quality: Var,
}

/// Graph handles for one fine pass.
#[derive(Debug, Clone)]
pub struct FinePass {
    pub selection: SelectionResult,
    pub composition: FineComposition,
    pub encoded: EncoderOutput,
    pub heatmaps: Var,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub coarse: HeatmapSet,
    pub fine: Option<HeatmapSet>,
    pub quality: f64,
    pub decision: GateDecision,
    pub selection: Option<SelectionResult>,
    pub pose: PoseEstimate,
}

impl Model {
    /// Fresh model with every parameter drawn from a generator seeded by `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = PatchEmbedder::init(&mut store, &cfg, &mut rng);
        let encoder = EncoderParams::init(&mut store, &cfg, &mut rng);
        let decoder = DecoderParams::init(&mut store, &cfg, &mut rng);
        let quality = QualityGate::init(&mut store, &cfg, &mut rng);
        let merge = MergeMlp::init(&mut store, &cfg, &mut rng);
        Ok(Self {
            cfg,
            store,
            embedder,
            encoder,
            decoder,
            quality,
            merge,
        })
    }

    pub fn coarse_pass(
        &self,
        g: &mut Graph,
        img: &ImageTensor,
        record: bool,
    ) -> Result<CoarsePass> {
        let seq = assemble_coarse_sequence(g, img, &self.embedder, &self.cfg)?;
        let encoded = encode(g, &seq, &self.encoder, record)?;
        let kp = encoded.sequence.keypoints(g)?;
        let heatmaps = decode_heatmaps(g, kp, &self.decoder)?;
        let q_tok = encoded
            .sequence
            .quality(g)?
            .expect("coarse sequence carries a quality token");
        let quality = predict_quality(g, q_tok, &self.quality)?;
        Ok(CoarsePass {
            encoded,
            heatmaps,
            quality,
        })
    }

    /// Per-patch relevance from a coarse pass that recorded attention.
    pub fn select(&self, coarse: &CoarsePass) -> Result<SelectionResult> {
        let seq = &coarse.encoded.sequence;
        let slices = coarse
            .encoded
            .attentions
            .iter()
            .map(|a| keypoint_attention_slice(a, seq.n_visual, seq.n_keypoints))
            .collect::<Result<Vec<_>>>()?;
        let (_, sel) = accumulate_and_select(&slices, self.cfg.beta_ema, self.cfg.alpha)?;
        Ok(sel)
    }

    pub fn fine_pass(
        &self,
        g: &mut Graph,
        img: &ImageTensor,
        coarse: &CoarsePass,
    ) -> Result<FinePass> {
        let selection = self.select(coarse)?;
        let fine_full = fine_grid_embed(g, img, &self.embedder, &self.cfg)?;
        let composition = compose_fine_sequence(
            g,
            &coarse.encoded.sequence,
            &selection,
            fine_full,
            &self.embedder,
            &self.merge,
            &self.cfg,
        )?;
        let encoded = encode(g, &composition.tokens, &self.encoder, false)?;
        let kp = encoded.sequence.keypoints(g)?;
        let heatmaps = decode_heatmaps(g, kp, &self.decoder)?;
        Ok(FinePass {
            selection,
            composition,
            encoded,
            heatmaps,
        })
    }

    /// Gated inference: the fine stage runs only when `Q < q_thres`.
    pub fn infer_with(&self, img: &ImageTensor, q_thres: f64) -> Result<Inference> {
        let mut g = Graph::new(&self.store);
        let coarse = self.coarse_pass(&mut g, img, true)?;
        let quality = g.value(coarse.quality).item();
        let coarse_maps = heatmap_set(&g, coarse.heatmaps, Stage::Coarse, &self.cfg)?;
        let decision = gate(quality, q_thres);
        let (fine, selection) = match decision {
            GateDecision::ExitCoarse => (None, None),
            GateDecision::Refine => {
                let f = self.fine_pass(&mut g, img, &coarse)?;
                (
                    Some(heatmap_set(&g, f.heatmaps, Stage::Fine, &self.cfg)?),
                    Some(f.selection),
                )
            }
        };
        let mut pose = decode_keypoints(fine.as_ref().unwrap_or(&coarse_maps));
        pose.quality = Some(quality);
        Ok(Inference {
            coarse: coarse_maps,
            fine,
            quality,
            decision,
            selection,
            pose,
        })
    }

    pub fn infer(&self, img: &ImageTensor) -> Result<Inference> {
        self.infer_with(img, self.cfg.q_thres)
    }

    /// Both stages regardless of quality, returning `(coarse, fine, Q)`.
    pub fn infer_both(&self, img: &ImageTensor) -> Result<(HeatmapSet, HeatmapSet, f64)> {
        let mut g = Graph::new(&self.store);
        let coarse = self.coarse_pass(&mut g, img, true)?;
        let fine = self.fine_pass(&mut g, img, &coarse)?;
        Ok((
            heatmap_set(&g, coarse.heatmaps, Stage::Coarse, &self.cfg)?,
            heatmap_set(&g, fine.heatmaps, Stage::Fine, &self.cfg)?,
            g.value(coarse.quality).item(),
        ))
    }
}
