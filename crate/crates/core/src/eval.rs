//! Dataset-level evaluation: both stages per sample, then metrics at any
//! quality threshold without re-running the model.

use std::fmt::Write;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::decoder::{gate, GateDecision};
use crate::error::{Error, Result};
use crate::flops::flops_estimate;
use crate::metrics::{
    ap_from_oks, coco_oks_thresholds, decode_keypoints, dropped_ratio, mean_keypoint_error, oks,
    pck, Keypoint, PoseEstimate,
};
use crate::model::Model;
use crate::training::Annotated;

/// Thresholds of the dropped-ratio sweep.
pub const SWEEP_THRESHOLDS: [f64; 10] = [0.0, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.97, 0.99];
pub const PCK_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub coarse: PoseEstimate,
    pub fine: PoseEstimate,
    pub quality: f64,
}

impl SampleOutcome {
    pub fn gated(&self, q_thres: f64) -> &PoseEstimate {
        match gate(self.quality, q_thres) {
            GateDecision::ExitCoarse => &self.coarse,
            GateDecision::Refine => &self.fine,
        }
    }
}

pub fn run_outcomes<S: Annotated>(model: &Model, samples: &[S]) -> Result<Vec<SampleOutcome>> {
    samples
        .iter()
        .map(|s| {
            let (c, f, q) = model.infer_both(s.image())?;
            let mut coarse = decode_keypoints(&c);
            let mut fine = decode_keypoints(&f);
            coarse.quality = Some(q);
            fine.quality = Some(q);
            Ok(SampleOutcome {
                coarse,
                fine,
                quality: q,
            })
        })
        .collect()
}

/// Torso length (shoulder midpoint to hip midpoint) when all four joints are
/// labeled, otherwise `0.3·√area`. Normalizer for PCK.
pub fn torso_norm(keypoints: &[Keypoint], area: f64) -> f64 {
    let fallback = 0.3 * area.max(1.0).sqrt();
    if keypoints.len() < 13 || ![5, 6, 11, 12].iter().all(|&i| keypoints[i].labeled()) {
        return fallback;
    }
    let mid = |a: &Keypoint, b: &Keypoint| ((a.x + b.x) / 2.0, (a.y + b.y) / 2.0);
    let s = mid(&keypoints[5], &keypoints[6]);
    let h = mid(&keypoints[11], &keypoints[12]);
    let d = ((s.0 - h.0).powi(2) + (s.1 - h.1).powi(2)).sqrt();
    if d > 0.0 {
        d
    } else {
        fallback
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub q_thres: f64,
    pub dropped_ratio: f64,
    pub mean_error: f64,
    pub pck: f64,
    pub ap: f64,
    pub avg_gflops: f64,
}

fn stage_metrics<S: Annotated>(
    poses: &[&PoseEstimate],
    samples: &[S],
    kappas: &[f64],
) -> Result<(f64, f64, f64)> {
    let preds: Vec<Vec<[f64; 2]>> = poses.iter().map(|p| p.keypoints.clone()).collect();
    let gts: Vec<Vec<Keypoint>> = samples.iter().map(|s| s.keypoints().to_vec()).collect();
    let norms: Vec<f64> = samples
        .iter()
        .map(|s| torso_norm(s.keypoints(), s.area()))
        .collect();
    let err = mean_keypoint_error(&preds, &gts)?;
    let p = pck(&preds, &gts, &norms, PCK_TAU)?;
    let mut scores = Vec::new();
    let mut oks_values = Vec::new();
    for (pose, s) in poses.iter().zip(samples) {
        match oks(&pose.keypoints, s.keypoints(), s.area(), kappas) {
            Ok(o) => {
                scores.push(pose.score());
                oks_values.push(o);
            }
            Err(Error::NoVisibleKeypoints) => {}
            Err(e) => return Err(e),
        }
    }
    let ap = ap_from_oks(&scores, &oks_values, &coco_oks_thresholds())?.ap;
    Ok((err, p, ap))
}

/// Metrics of the gated prediction at each threshold.
pub fn sweep<S: Annotated>(
    outcomes: &[SampleOutcome],
    samples: &[S],
    thresholds: &[f64],
    kappas: &[f64],
    cfg: &ModelConfig,
) -> Result<Vec<ThresholdRow>> {
    if outcomes.len() != samples.len() {
        return Err(Error::Config("one outcome per sample required".into()));
    }
    let qualities: Vec<f64> = outcomes.iter().map(|o| o.quality).collect();
    let coarse_g = flops_estimate(cfg, false).gflops();
    let full_g = flops_estimate(cfg, true).gflops();
    thresholds
        .iter()
        .map(|&t| {
            let poses: Vec<&PoseEstimate> = outcomes.iter().map(|o| o.gated(t)).collect();
            let (mean_error, pck, ap) = stage_metrics(&poses, samples, kappas)?;
            let dropped = dropped_ratio(&qualities, t)?;
            Ok(ThresholdRow {
                q_thres: t,
                dropped_ratio: dropped,
                mean_error,
                pck,
                ap,
                avg_gflops: dropped * coarse_g + (1.0 - dropped) * full_g,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("q_thres,dropped_ratio,mean_error,pck,ap,avg_gflops\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.q_thres, r.dropped_ratio, r.mean_error, r.pck, r.ap, r.avg_gflops
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub q_thres: f64,
    pub coarse: StageSummary,
    pub fine: StageSummary,
    pub gated: ThresholdRow,
    pub gflops_coarse_only: f64,
    pub gflops_refined: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageSummary {
    pub mean_error: f64,
    pub pck: f64,
    pub ap: f64,
}

pub fn summarize<S: Annotated>(
    outcomes: &[SampleOutcome],
    samples: &[S],
    q_thres: f64,
    kappas: &[f64],
    cfg: &ModelConfig,
) -> Result<EvalSummary> {
    let stage = |pick: fn(&SampleOutcome) -> &PoseEstimate| -> Result<StageSummary> {
        let poses: Vec<&PoseEstimate> = outcomes.iter().map(pick).collect();
        let (mean_error, pck, ap) = stage_metrics(&poses, samples, kappas)?;
        Ok(StageSummary {
            mean_error,
            pck,
            ap,
        })
    };
    Ok(EvalSummary {
        samples: samples.len(),
        q_thres,
        coarse: stage(|o| &o.coarse)?,
        fine: stage(|o| &o.fine)?,
        gated: sweep(outcomes, samples, &[q_thres], kappas, cfg)?[0],
        gflops_coarse_only: flops_estimate(cfg, false).gflops(),
        gflops_refined: flops_estimate(cfg, true).gflops(),
    })
}

impl EvalSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples        {}", self.samples);
        let _ = writeln!(s, "q_thres        {}", self.q_thres);
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>8} {:>8}",
            "stage", "error_px", "pck", "ap"
        );
        for (name, st) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            let _ = writeln!(
                s,
                "{name:<14} {:>10.3} {:>8.4} {:>8.4}",
                st.mean_error, st.pck, st.ap
            );
        }
        let g = &self.gated;
        let _ = writeln!(
            s,
            "{:<14} {:>10.3} {:>8.4} {:>8.4}",
            "gated", g.mean_error, g.pck, g.ap
        );
        let _ = writeln!(s, "dropped_ratio  {:.4}", g.dropped_ratio);
        let _ = writeln!(
            s,
            "gflops         coarse-only {:.4}, refined {:.4}, average {:.4} (MACs)",
            self.gflops_coarse_only, self.gflops_refined, g.avg_gflops
        );
        s
    }
}
