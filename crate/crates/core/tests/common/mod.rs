//! Finite-difference checker and brute-force reference implementations shared
//! by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_pose_core::metrics::Keypoint;
use sparse_pose_core::params::Gradients;
use sparse_pose_core::synth::synth_sample;
use sparse_pose_core::training::sample_loss;
use sparse_pose_core::{Graph, Model, ModelConfig, ParamStore, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [11, 22, 33];

/// Relative error with a floor on the denominator, so gradients that are
/// exactly zero (attention key biases) are judged on absolute noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Worst relative error between analytic and central-difference gradients of
/// `sum(w ⊙ f(inputs))` for a fixed random `w`, over every input element.
pub fn op_max_err<F>(inputs: Vec<Tensor>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let probe = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.constant(t.clone()).unwrap())
            .collect();
        let out = f(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let weights = random(&mut rng, &probe, -1.0, 1.0);

    let eval = |inputs: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        let w = g.constant(weights.clone()).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        if !grads {
            return (value, vec![]);
        }
        g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map_or_else(|| vec![0.0; g.value(v).len()], |s| s.to_vec())
            })
            .collect();
        (value, gs)
    };

    let (_, analytic) = eval(&inputs, true);
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

/// Worst error of every differentiable op for one seed, by op name.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[3, 4], -2.0, 2.0);
    let row = random(&mut rng, &[4], -1.0, 1.0);
    out.push((
        "add",
        op_max_err(vec![a.clone(), b.clone()], seed, |g, v| g.add(v[0], v[1])),
    ));
    out.push((
        "sub",
        op_max_err(vec![a.clone(), b.clone()], seed, |g, v| g.sub(v[0], v[1])),
    ));
    out.push((
        "mul",
        op_max_err(vec![a.clone(), b.clone()], seed, |g, v| g.mul(v[0], v[1])),
    ));
    out.push((
        "add_row",
        op_max_err(vec![a.clone(), row], seed, |g, v| g.add_row(v[0], v[1])),
    ));
    out.push((
        "scale",
        op_max_err(vec![a.clone()], seed, |g, v| g.scale(v[0], -1.7)),
    ));
    out.push((
        "gelu",
        op_max_err(vec![a.clone()], seed, |g, v| g.gelu(v[0])),
    ));
    out.push((
        "sigmoid",
        op_max_err(vec![a.clone()], seed, |g, v| g.sigmoid(v[0])),
    ));
    // keep away from the kink at zero
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    out.push(("abs", op_max_err(vec![away], seed, |g, v| g.abs(v[0]))));
    out.push(("sum", op_max_err(vec![a.clone()], seed, |g, v| g.sum(v[0]))));
    out.push((
        "mean",
        op_max_err(vec![a.clone()], seed, |g, v| g.mean(v[0])),
    ));
    out.push((
        "mse",
        op_max_err(vec![a, b], seed, |g, v| g.mse(v[0], v[1])),
    ));

    let a = random(&mut rng, &[3, 5], -1.0, 1.0);
    let b = random(&mut rng, &[5, 2], -1.0, 1.0);
    let bias = random(&mut rng, &[2], -1.0, 1.0);
    out.push((
        "matmul",
        op_max_err(vec![a.clone(), b.clone()], seed, |g, v| {
            g.matmul(v[0], v[1])
        }),
    ));
    out.push((
        "linear",
        op_max_err(vec![a.clone(), b, bias], seed, |g, v| {
            g.linear(v[0], v[1], v[2])
        }),
    ));
    out.push((
        "transpose",
        op_max_err(vec![a.clone()], seed, |g, v| g.transpose(v[0])),
    ));
    out.push((
        "softmax_rows",
        op_max_err(vec![a.clone()], seed, |g, v| g.softmax_rows(v[0])),
    ));
    let gamma = random(&mut rng, &[5], 0.5, 1.5);
    let beta = random(&mut rng, &[5], -0.5, 0.5);
    out.push((
        "layer_norm",
        op_max_err(vec![a, gamma, beta], seed, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
    ));

    let a = random(&mut rng, &[4, 6], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    let c = random(&mut rng, &[3, 6], -1.0, 1.0);
    out.push((
        "slice_cols",
        op_max_err(vec![a.clone()], seed, |g, v| g.slice_cols(v[0], 2, 3)),
    ));
    out.push((
        "slice_rows",
        op_max_err(vec![a.clone()], seed, |g, v| g.slice_rows(v[0], 1, 2)),
    ));
    out.push((
        "concat_cols",
        op_max_err(vec![a.clone(), b], seed, |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
    ));
    out.push((
        "concat_rows",
        op_max_err(vec![a.clone(), c], seed, |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
    ));
    out.push((
        "gather_rows",
        op_max_err(vec![a.clone()], seed, |g, v| {
            g.gather_rows(v[0], &[3, 0, 3, 1])
        }),
    ));
    out.push((
        "reshape",
        op_max_err(vec![a], seed, |g, v| g.reshape(v[0], &[3, 8])),
    ));
    out
}

/// 32×32 input, D = 8, two layers, two heads.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        patch_h: 8,
        patch_w: 8,
        dim: 8,
        depth: 2,
        heads: 2,
        ..ModelConfig::toy()
    }
}

/// Worst relative error over the full two-stage loss (quality term on) for one
/// seed: every element of small parameters, 24 random elements of large ones.
pub fn model_max_err(seed: u64) -> (f64, String) {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), seed).unwrap();
    let sample = synth_sample(seed, &cfg).unwrap();
    let lambda = 0.03;
    let mut grads = Gradients::for_store(&model.store);
    sample_loss(&model, &sample, lambda, &mut grads).unwrap();

    let loss_at = |m: &Model| {
        let mut scratch = Gradients::for_store(&m.store);
        sample_loss(m, &sample, lambda, &mut scratch).unwrap().total
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).len();
        let picks: Vec<usize> = if n <= 24 {
            (0..n).collect()
        } else {
            (0..24).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + H;
            let lp = loss_at(&model);
            model.store.get_mut(id).data_mut()[i] = orig - H;
            let lm = loss_at(&model);
            model.store.get_mut(id).data_mut()[i] = orig;
            let err = rel_err(grads.get(id).data()[i], (lp - lm) / (2.0 * H));
            if err > worst.0 {
                worst = (err, format!("{}[{i}]", model.store.name(id)));
            }
        }
    }
    worst
}

/// Indices of the k largest scores by bubble sort; ties favour the lower index.
pub fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    for i in 0..idx.len() {
        for j in 0..idx.len() - 1 - i {
            let (a, b) = (idx[j], idx[j + 1]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                idx.swap(j, j + 1);
            }
        }
    }
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

pub fn oks_oracle(pred: &[[f64; 2]], gt: &[Keypoint], area: f64, kappas: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gt.len() {
        if gt[i].v == 0 {
            continue;
        }
        let dx = pred[i][0] - gt[i].x;
        let dy = pred[i][1] - gt[i].y;
        num += (-(dx * dx + dy * dy) / (2.0 * area * kappas[i] * kappas[i])).exp();
        den += 1.0;
    }
    num / den
}

/// Interpolated precision at recall r is the best precision over every
/// score cutoff whose recall reaches r. Scores must be distinct.
pub fn ap_oracle(scores: &[f64], oks_values: &[f64], t: f64) -> f64 {
    let n = scores.len();
    let mut cutoffs = Vec::new();
    for i in 0..n {
        let above: Vec<usize> = (0..n).filter(|&j| scores[j] >= scores[i]).collect();
        let tp = above.iter().filter(|&&j| oks_values[j] >= t).count();
        cutoffs.push((tp as f64 / n as f64, tp as f64 / above.len() as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        sum += cutoffs
            .iter()
            .filter(|c| c.0 >= r)
            .map(|c| c.1)
            .fold(0.0, f64::max);
    }
    sum / 101.0
}

pub fn pck_oracle(preds: &[Vec<[f64; 2]>], gts: &[Vec<Keypoint>], norms: &[f64], tau: f64) -> f64 {
    let (mut hit, mut total) = (0.0, 0.0);
    for s in 0..preds.len() {
        for i in 0..gts[s].len() {
            if gts[s][i].v > 0 {
                total += 1.0;
                let d = (preds[s][i][0] - gts[s][i].x).hypot(preds[s][i][1] - gts[s][i].y);
                if d < tau * norms[s] {
                    hit += 1.0;
                }
            }
        }
    }
    hit / total
}

/// Ground truth with the first keypoint always labeled, a noisy prediction and an area.
pub fn random_instance(rng: &mut ChaCha8Rng, m: usize) -> (Vec<[f64; 2]>, Vec<Keypoint>, f64) {
    let gt: Vec<Keypoint> = (0..m)
        .map(|i| Keypoint {
            x: rng.gen_range(0.0..192.0),
            y: rng.gen_range(0.0..256.0),
            v: if i == 0 { 2 } else { rng.gen_range(0..3) },
        })
        .collect();
    let spread = rng.gen_range(0.5..30.0);
    let pred = gt
        .iter()
        .map(|k| {
            [
                k.x + rng.gen_range(-spread..spread),
                k.y + rng.gen_range(-spread..spread),
            ]
        })
        .collect();
    (pred, gt, rng.gen_range(500.0..20000.0))
}
