//! Heatmap decoding and pose-quality metrics.

use serde::{Deserialize, Serialize};

use crate::decoder::{HeatmapSet, Stage};
use crate::error::{shape_err, Error, Result};

/// Per-keypoint OKS constants (`κ = 2σ`) for the 17 COCO keypoints.
pub const COCO_KAPPAS: [f64; 17] = [
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214,
    0.174, 0.174, 0.178, 0.178,
];

/// Uniform OKS constant for synthetic data.
pub const SYNTH_KAPPA: f64 = 0.08;

/// OKS thresholds `0.50:0.05:0.95`.
pub fn coco_oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Annotated keypoint: `v = 0` unlabeled, `1` labeled but occluded, `2` visible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn labeled(&self) -> bool {
        self.v > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub keypoints: Vec<Keypoint>,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    /// `(x, y)` in input-image pixels.
    pub keypoints: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
    /// Maps with no unique maximum (all cells equal).
    pub degenerate: Vec<bool>,
    pub stage_used: Stage,
    pub quality: Option<f64>,
}

impl PoseEstimate {
    /// Instance score used for AP ranking: mean keypoint confidence.
    pub fn score(&self) -> f64 {
        if self.scores.is_empty() {
            0.0
        } else {
            self.scores.iter().sum::<f64>() / self.scores.len() as f64
        }
    }
}

/// Argmax per map, a quarter-cell shift toward the larger horizontal and
/// vertical neighbour, then scaling by the heatmap stride. The first maximum in
/// row-major order wins ties; an all-equal map decodes to its center cell.
pub fn decode_keypoints(hm: &HeatmapSet) -> PoseEstimate {
    let (rows, cols) = (hm.rows(), hm.cols());
    let sy = hm.source.0 as f64 / rows as f64;
    let sx = hm.source.1 as f64 / cols as f64;
    let mut keypoints = Vec::with_capacity(hm.count());
    let mut scores = Vec::with_capacity(hm.count());
    let mut degenerate = Vec::with_capacity(hm.count());
    for i in 0..hm.count() {
        let m = hm.map(i);
        let (mut best, mut peak) = (0, f64::NEG_INFINITY);
        for (j, &v) in m.iter().enumerate() {
            if v > peak {
                peak = v;
                best = j;
            }
        }
        let flat = m.iter().all(|&v| v == m[0]);
        if flat {
            best = (rows / 2) * cols + cols / 2;
        }
        let (r, c) = (best / cols, best % cols);
        let (mut fy, mut fx) = (r as f64, c as f64);
        if !flat {
            if c > 0 && c + 1 < cols {
                fx += 0.25
                    * (m[best + 1] - m[best - 1]).signum()
                    * f64::from(m[best + 1] != m[best - 1]);
            }
            if r > 0 && r + 1 < rows {
                fy += 0.25
                    * (m[best + cols] - m[best - cols]).signum()
                    * f64::from(m[best + cols] != m[best - cols]);
            }
        }
        let x = (fx * sx).clamp(0.0, hm.source.1 as f64 - 1.0);
        let y = (fy * sy).clamp(0.0, hm.source.0 as f64 - 1.0);
        keypoints.push([x, y]);
        scores.push(peak.clamp(0.0, 1.0));
        degenerate.push(flat);
    }
    PoseEstimate {
        keypoints,
        scores,
        degenerate,
        stage_used: hm.stage,
        quality: None,
    }
}

/// Object keypoint similarity over labeled keypoints:
/// `Σ exp(−d²/(2·area·κ²))·[v>0] / Σ [v>0]`.
pub fn oks(pred: &[[f64; 2]], gt: &[Keypoint], area: f64, kappas: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || kappas.len() != gt.len() {
        return Err(shape_err(
            "oks",
            format!(
                "{} predictions, {} gt, {} kappas",
                pred.len(),
                gt.len(),
                kappas.len()
            ),
        ));
    }
    if area <= 0.0 {
        return Err(Error::Config(format!("oks: area {area} must be positive")));
    }
    let mut num = 0.0;
    let mut den = 0usize;
    for ((p, g), k) in pred.iter().zip(gt).zip(kappas) {
        if !g.labeled() {
            continue;
        }
        let d2 = (p[0] - g.x).powi(2) + (p[1] - g.y).powi(2);
        num += (-d2 / (2.0 * area * k * k)).exp();
        den += 1;
    }
    if den == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(num / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<(f64, f64)>,
}

/// COCO-style 101-point interpolated AP for one detection per image, given
/// each detection's score and its OKS against the image's single instance.
pub fn ap_from_oks(scores: &[f64], oks_values: &[f64], thresholds: &[f64]) -> Result<ApReport> {
    if scores.len() != oks_values.len() {
        return Err(shape_err("ap_from_oks", "scores vs oks lengths"));
    }
    let n_gt = scores.len();
    if n_gt == 0 {
        return Err(Error::Empty("ground truth"));
    }
    let mut order: Vec<usize> = (0..n_gt).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut tp = 0usize;
        let mut recall = Vec::with_capacity(n_gt);
        let mut precision = Vec::with_capacity(n_gt);
        for (k, &i) in order.iter().enumerate() {
            if oks_values[i] >= t {
                tp += 1;
            }
            recall.push(tp as f64 / n_gt as f64);
            precision.push(tp as f64 / (k + 1) as f64);
        }
        for i in (1..precision.len()).rev() {
            if precision[i] > precision[i - 1] {
                precision[i - 1] = precision[i];
            }
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            if idx < precision.len() {
                sum += precision[idx];
            }
        }
        per_threshold.push((t, sum / 101.0));
    }
    let ap = per_threshold.iter().map(|(_, a)| a).sum::<f64>() / per_threshold.len().max(1) as f64;
    let at = |target: f64| {
        per_threshold
            .iter()
            .find(|(t, _)| (t - target).abs() < 1e-9)
            .map_or(f64::NAN, |(_, a)| *a)
    };
    Ok(ApReport {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        per_threshold,
    })
}

/// AP for single-instance images. Ground truths without labeled keypoints are skipped.
pub fn average_precision(
    estimates: &[PoseEstimate],
    gts: &[GroundTruth],
    kappas: &[f64],
    thresholds: &[f64],
) -> Result<ApReport> {
    if estimates.len() != gts.len() {
        return Err(shape_err(
            "average_precision",
            "one estimate per ground truth",
        ));
    }
    let mut scores = Vec::with_capacity(gts.len());
    let mut oks_values = Vec::with_capacity(gts.len());
    for (e, g) in estimates.iter().zip(gts) {
        match oks(&e.keypoints, &g.keypoints, g.area, kappas) {
            Ok(o) => {
                scores.push(e.score());
                oks_values.push(o);
            }
            Err(Error::NoVisibleKeypoints) => continue,
            Err(e) => return Err(e),
        }
    }
    ap_from_oks(&scores, &oks_values, thresholds)
}

/// Fraction of labeled keypoints within `tau · norm` of the ground truth.
pub fn pck(
    preds: &[Vec<[f64; 2]>],
    gts: &[Vec<Keypoint>],
    norm_lengths: &[f64],
    tau: f64,
) -> Result<f64> {
    if preds.len() != gts.len() || gts.len() != norm_lengths.len() {
        return Err(shape_err("pck", "mismatched sample counts"));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), &norm) in preds.iter().zip(gts).zip(norm_lengths) {
        if norm <= 0.0 {
            return Err(Error::Config(format!("pck: normalization length {norm}")));
        }
        if p.len() != g.len() {
            return Err(shape_err("pck", "keypoint count"));
        }
        for (pp, gg) in p.iter().zip(g) {
            if !gg.labeled() {
                continue;
            }
            total += 1;
            if ((pp[0] - gg.x).powi(2) + (pp[1] - gg.y).powi(2)).sqrt() < tau * norm {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(hit as f64 / total as f64)
}

/// Mean Euclidean error over labeled keypoints, in pixels.
pub fn mean_keypoint_error(preds: &[Vec<[f64; 2]>], gts: &[Vec<Keypoint>]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        for (pp, gg) in p.iter().zip(g) {
            if gg.labeled() {
                sum += ((pp[0] - gg.x).powi(2) + (pp[1] - gg.y).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(sum / n as f64)
}

/// Fraction of samples whose quality meets the threshold and so skip refinement.
pub fn dropped_ratio(qualities: &[f64], thres: f64) -> Result<f64> {
    if qualities.is_empty() {
        return Err(Error::Empty("quality list"));
    }
    let kept = qualities.iter().filter(|&&q| q >= thres).count();
    Ok(kept as f64 / qualities.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_map(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> HeatmapSet {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        let maps = Tensor::new(vec![1, rows, cols], data).unwrap();
        HeatmapSet::new(maps, Stage::Coarse, (rows * 4, cols * 4)).unwrap()
    }

    #[test]
    fn decode_single_peak() {
        let hm = single_map(16, 12, |r, c| if (r, c) == (10, 7) { 1.0 } else { 0.0 });
        let p = decode_keypoints(&hm);
        assert_eq!(p.keypoints[0], [28.0, 40.0]);
        assert_eq!(p.scores[0], 1.0);
        assert!(!p.degenerate[0]);
    }

    #[test]
    fn decode_quarter_offset() {
        let hm = single_map(16, 12, |r, c| match (r, c) {
            (10, 7) => 1.0,
            (10, 8) => 0.5,
            (11, 7) => 0.2,
            _ => 0.0,
        });
        assert_eq!(
            decode_keypoints(&hm).keypoints[0],
            [4.0 * 7.25, 4.0 * 10.25]
        );
    }

    #[test]
    fn decode_tie_takes_lower_index() {
        let hm = single_map(8, 8, |r, c| {
            if (r, c) == (2, 2) || (r, c) == (5, 5) {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(decode_keypoints(&hm).keypoints[0], [8.0, 8.0]);
    }

    #[test]
    fn decode_flat_map_is_degenerate() {
        let hm = single_map(8, 6, |_, _| 0.3);
        let p = decode_keypoints(&hm);
        assert!(p.degenerate[0]);
        assert_eq!(p.keypoints[0], [12.0, 16.0]);
    }

    #[test]
    fn oks_closed_forms() {
        let gt = [Keypoint {
            x: 3.0,
            y: 4.0,
            v: 2,
        }];
        assert_eq!(oks(&[[3.0, 4.0]], &gt, 10.0, &[0.1]).unwrap(), 1.0);
        // d² = 2·area·κ² gives exp(-1)
        let (area, k) = (50.0, 0.08);
        let d = (2.0f64 * area * k * k).sqrt();
        let o = oks(&[[3.0 + d, 4.0]], &gt, area, &[k]).unwrap();
        assert!((o - (-1.0f64).exp()).abs() < 1e-12);
        let none = [Keypoint {
            x: 0.0,
            y: 0.0,
            v: 0,
        }];
        assert!(matches!(
            oks(&[[0.0, 0.0]], &none, 1.0, &[0.1]),
            Err(Error::NoVisibleKeypoints)
        ));
        assert!(oks(&[[0.0, 0.0]], &gt, 0.0, &[0.1]).is_err());
    }

    #[test]
    fn ap_extremes() {
        let r = ap_from_oks(&[0.9, 0.8, 0.7], &[1.0; 3], &coco_oks_thresholds()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        let r = ap_from_oks(&[0.9, 0.8], &[0.0; 2], &coco_oks_thresholds()).unwrap();
        assert_eq!(r.ap, 0.0);
        assert!(ap_from_oks(&[], &[], &[0.5]).is_err());
    }

    #[test]
    fn pck_extremes() {
        let gt = vec![vec![
            Keypoint {
                x: 0.0,
                y: 0.0,
                v: 2
            };
            3
        ]];
        assert_eq!(pck(&[vec![[0.0, 0.0]; 3]], &gt, &[10.0], 0.5).unwrap(), 1.0);
        assert_eq!(
            pck(&[vec![[10.0, 0.0]; 3]], &gt, &[10.0], 0.5).unwrap(),
            0.0
        );
        assert!(pck(&[vec![[0.0, 0.0]; 3]], &gt, &[0.0], 0.5).is_err());
    }

    #[test]
    fn dropped_ratio_boundaries() {
        let q = [0.2, 0.6, 0.9];
        assert_eq!(dropped_ratio(&q, 0.0).unwrap(), 1.0);
        assert_eq!(dropped_ratio(&q, 0.95).unwrap(), 0.0);
        assert!((dropped_ratio(&q, 0.6).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(dropped_ratio(&[], 0.5).is_err());
    }
}
