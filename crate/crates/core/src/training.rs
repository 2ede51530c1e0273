//! Losses, schedules and the optimization loop.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, HEATMAP_STRIDE};
use crate::decoder::{heatmap_set, Stage};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{decode_keypoints, mean_keypoint_error, oks, Keypoint, SYNTH_KAPPA};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::Gradients;
use crate::synth::SynthSample;
use crate::tensor::Tensor;

/// Gaussian width of target heatmaps, in heatmap cells.
pub const GT_SIGMA: f64 = 2.0;
pub const QUALITY_WEIGHT: f64 = 0.03;

/// `exp(−((u−x)²+(v−y)²)/(2σ²))` over a `rows × cols` grid, with `(x, y)` in
/// cell units. The flag is set when the center lies outside the grid.
pub fn gaussian_heatmap(
    center: (f64, f64),
    size: (usize, usize),
    sigma: f64,
) -> Result<(Tensor, bool)> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma {sigma} must be positive")));
    }
    let (rows, cols) = size;
    let (x, y) = center;
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(rows * cols);
    for v in 0..rows {
        for u in 0..cols {
            let d2 = (u as f64 - x).powi(2) + (v as f64 - y).powi(2);
            data.push((-d2 / denom).exp());
        }
    }
    let outside = x < 0.0 || y < 0.0 || x > (cols - 1) as f64 || y > (rows - 1) as f64;
    Ok((Tensor::new(vec![rows, cols], data)?, outside))
}

/// Target maps `[M × Ĥ × Ŵ]` for image-space keypoints. Unlabeled joints get all-zero maps.
pub fn gt_heatmaps(keypoints: &[Keypoint], cfg: &ModelConfig) -> Result<Tensor> {
    let (rows, cols) = cfg.heatmap_size();
    let stride = HEATMAP_STRIDE as f64;
    let mut data = Vec::with_capacity(keypoints.len() * rows * cols);
    for k in keypoints {
        if k.labeled() {
            let (m, outside) =
                gaussian_heatmap((k.x / stride, k.y / stride), (rows, cols), GT_SIGMA)?;
            if outside {
                log::debug!("keypoint ({}, {}) lies outside the heatmap", k.x, k.y);
            }
            data.extend_from_slice(m.data());
        } else {
            data.resize(data.len() + rows * cols, 0.0);
        }
    }
    Tensor::new(vec![keypoints.len(), rows, cols], data)
}

/// Sum of the per-stage mean squared errors against `gt` (the fine term is
/// skipped when that stage did not run).
pub fn heatmap_loss(g: &mut Graph, coarse: Var, fine: Option<Var>, gt: Var) -> Result<Var> {
    let lc = g.mse(coarse, gt)?;
    match fine {
        Some(f) => {
            let lf = g.mse(f, gt)?;
            g.add(lc, lf)
        }
        None => Ok(lc),
    }
}

/// `|Q − target|` as a scalar.
pub fn quality_loss(g: &mut Graph, q: Var, target: f64) -> Result<Var> {
    let t = g.constant(Tensor::full(g.shape(q), target))?;
    let d = g.sub(q, t)?;
    let a = g.abs(d)?;
    g.sum(a)
}

/// Zero for the first 180/210 of the schedule, then the quality weight.
pub fn lambda_schedule(epoch: usize, total_epochs: usize) -> f64 {
    if epoch < (180 * total_epochs).div_ceil(210) {
        0.0
    } else {
        QUALITY_WEIGHT
    }
}

/// Step decay by 10× at 170/210 and again at 200/210 of the schedule.
pub fn lr_schedule(epoch: usize, total_epochs: usize, base: f64) -> f64 {
    if epoch >= (200 * total_epochs).div_ceil(210) {
        base * 0.01
    } else if epoch >= (170 * total_epochs).div_ceil(210) {
        base * 0.1
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossReport {
    pub l_heatmap: f64,
    pub l_qp: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: bool,
    pub train_samples: usize,
    pub val_samples: usize,
    /// First synthetic seed; validation samples follow the training ones.
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 8,
            lr: 1e-3,
            lr_decay: true,
            train_samples: 2000,
            val_samples: 200,
            data_seed: 1_000_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::Config(
                "epochs, batch_size and train_samples must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay {
            lr_schedule(epoch, self.epochs, self.lr)
        } else {
            self.lr
        }
    }
}

/// Loss of one sample with both stages executed; gradients are added to `grads`.
pub fn sample_loss(
    model: &Model,
    sample: &SynthSample,
    lambda: f64,
    grads: &mut Gradients,
) -> Result<LossReport> {
    let cfg = &model.cfg;
    let mut g = Graph::new(&model.store);
    let coarse = model.coarse_pass(&mut g, &sample.image, true)?;
    let fine = model.fine_pass(&mut g, &sample.image, &coarse)?;
    let m = cfg.keypoints;
    let gt = sample
        .gt_heatmaps
        .maps
        .clone()
        .reshape(&[m, cfg.heatmap_len()])?;
    let gt = g.constant(gt)?;
    let l_heat = heatmap_loss(&mut g, coarse.heatmaps, Some(fine.heatmaps), gt)?;

    // target from the detached coarse prediction
    let pred = decode_keypoints(&heatmap_set(&g, coarse.heatmaps, Stage::Coarse, cfg)?);
    let kappas = vec![SYNTH_KAPPA; m];
    let target = match oks(&pred.keypoints, &sample.keypoints, sample.area, &kappas) {
        Ok(o) => Some(o),
        Err(Error::NoVisibleKeypoints) => None,
        Err(e) => return Err(e),
    };
    let q = g.value(coarse.quality).item();
    let l_qp = target.map_or(0.0, |t| (q - t).abs());

    let loss = match target {
        Some(t) if lambda != 0.0 => {
            let lq = quality_loss(&mut g, coarse.quality, t)?;
            let lq = g.scale(lq, lambda)?;
            g.add(l_heat, lq)?
        }
        _ => l_heat,
    };
    let total = g.value(loss).item();
    let l_heatmap = g.value(l_heat).item();
    g.backward(loss)?;
    g.accumulate_param_grads(grads);
    Ok(LossReport {
        l_heatmap,
        l_qp,
        lambda,
        total,
    })
}

/// An image with ground-truth keypoints and an OKS scale.
pub trait Annotated {
    fn image(&self) -> &ImageTensor;
    fn keypoints(&self) -> &[Keypoint];
    fn area(&self) -> f64;
}

impl Annotated for SynthSample {
    fn image(&self) -> &ImageTensor {
        &self.image
    }

    fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    fn area(&self) -> f64 {
        self.area
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub coarse_error: f64,
    pub fine_error: f64,
    /// Error of the gated prediction at the model's threshold.
    pub gated_error: f64,
    pub qualities: Vec<f64>,
}

/// Mean keypoint error (pixels) of each stage, both stages run for every sample.
pub fn evaluate<S: Annotated>(model: &Model, samples: &[S]) -> Result<EvalReport> {
    let mut coarse = Vec::with_capacity(samples.len());
    let mut fine = Vec::with_capacity(samples.len());
    let mut gated = Vec::with_capacity(samples.len());
    let mut qualities = Vec::with_capacity(samples.len());
    for s in samples {
        let (c, f, q) = model.infer_both(s.image())?;
        let pc = decode_keypoints(&c).keypoints;
        let pf = decode_keypoints(&f).keypoints;
        gated.push(if q < model.cfg.q_thres {
            pf.clone()
        } else {
            pc.clone()
        });
        coarse.push(pc);
        fine.push(pf);
        qualities.push(q);
    }
    let gts: Vec<Vec<Keypoint>> = samples.iter().map(|s| s.keypoints().to_vec()).collect();
    Ok(EvalReport {
        coarse_error: mean_keypoint_error(&coarse, &gts)?,
        fine_error: mean_keypoint_error(&fine, &gts)?,
        gated_error: mean_keypoint_error(&gated, &gts)?,
        qualities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_heatmap: f64,
    pub l_qp: f64,
    pub lambda: f64,
    pub lr: f64,
    pub eval_error: f64,
}

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,l_heatmap,l_qp,lambda,lr,eval_error\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.l_heatmap, r.l_qp, r.lambda, r.lr, r.eval_error
        );
    }
    out
}

/// Optimizer, shuffle generator and epoch counter around a [`Model`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, train: TrainConfig, seed: u64) -> Result<Self> {
        train.validate()?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            model,
            adam,
            // distinct stream from parameter init
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed),
            train,
            epoch: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.train.epochs
    }

    /// One optimizer step on `batch`; returns the batch-mean losses.
    pub fn step(&mut self, batch: &[&SynthSample], lambda: f64, lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut grads = Gradients::for_store(&self.model.store);
        let mut sum = LossReport::default();
        for s in batch {
            let r = sample_loss(&self.model, s, lambda, &mut grads)?;
            sum.l_heatmap += r.l_heatmap;
            sum.l_qp += r.l_qp;
            sum.total += r.total;
        }
        let n = batch.len() as f64;
        let report = LossReport {
            l_heatmap: sum.l_heatmap / n,
            l_qp: sum.l_qp / n,
            lambda,
            total: sum.total / n,
        };
        if !report.total.is_finite() || !grads.global_norm().is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.adam.step as usize,
                loss: report.total,
            });
        }
        grads.scale(1.0 / n);
        self.adam.update(&mut self.model.store, &grads, lr);
        Ok(report)
    }

    /// Batches for the next epoch, drawn from the shuffle generator.
    pub fn epoch_order(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// Runs one epoch over `data` and evaluates on `val` (if non-empty).
    pub fn run_epoch(&mut self, data: &[SynthSample], val: &[SynthSample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let epoch = self.epoch;
        let lambda = lambda_schedule(epoch, self.train.epochs);
        let lr = self.train.lr_at(epoch);
        let order = self.epoch_order(data.len());
        let mut sum = LossReport::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.train.batch_size) {
            let batch: Vec<&SynthSample> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.step(&batch, lambda, lr).map_err(|e| match e {
                Error::NonFinite { op } => {
                    log::error!("non-finite value in {op} at epoch {epoch}");
                    Error::Diverged {
                        epoch,
                        step: self.adam.step as usize,
                        loss: f64::NAN,
                    }
                }
                other => other,
            })?;
            sum.l_heatmap += r.l_heatmap;
            sum.l_qp += r.l_qp;
            steps += 1;
        }
        let eval_error = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(&self.model, val)?.gated_error
        };
        self.epoch += 1;
        let row = EpochLog {
            epoch,
            l_heatmap: sum.l_heatmap / steps as f64,
            l_qp: sum.l_qp / steps as f64,
            lambda,
            lr,
            eval_error,
        };
        log::info!(
            "epoch {epoch}: l_heatmap {:.6} l_qp {:.4} eval_error {:.3}",
            row.l_heatmap,
            row.l_qp,
            row.eval_error
        );
        Ok(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_closed_forms() {
        let (m, outside) = gaussian_heatmap((5.0, 7.0), (16, 12), 2.0).unwrap();
        assert!(!outside);
        assert_eq!(m.at2(7, 5), 1.0);
        assert!((m.at2(7, 6) - (-1.0f64 / 8.0).exp()).abs() < 1e-15);
        assert!(gaussian_heatmap((5.0, 7.0), (16, 12), 0.0).is_err());
        assert!(gaussian_heatmap((-3.0, 7.0), (16, 12), 2.0).unwrap().1);
    }

    #[test]
    fn unlabeled_keypoint_gives_zero_map() {
        let cfg = ModelConfig::toy();
        let kps = vec![
            Keypoint {
                x: 10.0,
                y: 10.0,
                v: 0
            };
            cfg.keypoints
        ];
        assert!(gt_heatmaps(&kps, &cfg)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn schedules() {
        assert_eq!(lambda_schedule(0, 210), 0.0);
        assert_eq!(lambda_schedule(179, 210), 0.0);
        assert_eq!(lambda_schedule(180, 210), 0.03);
        assert_eq!(lambda_schedule(17, 21), 0.0);
        assert_eq!(lambda_schedule(18, 21), 0.03);
        assert_eq!(lr_schedule(169, 210, 5e-4), 5e-4);
        assert!((lr_schedule(170, 210, 5e-4) - 5e-5).abs() < 1e-20);
        assert!((lr_schedule(200, 210, 5e-4) - 5e-6).abs() < 1e-20);
    }

    #[test]
    fn quality_loss_values() {
        let store = crate::params::ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.leaf(Tensor::full(&[1, 1], 0.9)).unwrap();
        let l = quality_loss(&mut g, q, 0.6).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(q).unwrap(), &[1.0]);
    }
}
