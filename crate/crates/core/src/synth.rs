//! Procedural stick-figure images with COCO-ordered joint annotations.
//!
//! Each joint is stamped as a small disc in its own saturated color over a
//! low-saturation textured background, so a joint's location is recoverable
//! from pixels alone. Joints hidden by a later stamp or by the random
//! rectangular occluder are labeled `v = 1`; all others are `v = 2`.

use std::f64::consts::PI;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, COCO_KEYPOINTS};
use crate::decoder::{HeatmapSet, Stage};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::metrics::Keypoint;
use crate::training::gt_heatmaps;

pub const JOINT_NAMES: [&str; COCO_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Limb segments as joint index pairs.
pub const SKELETON: [(usize, usize); 12] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

const JOINT_RADIUS: f64 = 1.0;
const MARGIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub seed: u64,
    pub image: ImageTensor,
    pub keypoints: Vec<Keypoint>,
    /// Area of the figure's bounding box, used as the OKS scale.
    pub area: f64,
    pub gt_heatmaps: HeatmapSet,
}

/// Saturated RGB color of joint `j`.
pub fn joint_color(j: usize) -> [f64; 3] {
    hsv(j as f64 / COCO_KEYPOINTS as f64, 1.0, 1.0)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rot(v: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn offset(p: [f64; 2], len: f64, angle: f64) -> [f64; 2] {
    // angle 0 points down the image
    [p[0] - len * angle.sin(), p[1] + len * angle.cos()]
}

/// Joint positions in figure units (height ≈ 1, pelvis at the origin), plus the head radius.
fn pose(rng: &mut ChaCha8Rng) -> ([[f64; 2]; COCO_KEYPOINTS], f64) {
    let lean = Normal::new(0.0, 0.12).unwrap().sample(rng);
    let yaw: f64 = rng.gen_range(0.6..1.0);
    let torso = rng.gen_range(0.28..0.33);
    let shoulder_w = 0.11 * yaw;
    let hip_w = 0.07 * yaw;
    let head_r = rng.gen_range(0.055..0.07);

    let up = rot([0.0, -torso], lean);
    let neck = up;
    let across = rot([1.0, 0.0], lean);
    let ls = [
        neck[0] + shoulder_w * across[0],
        neck[1] + shoulder_w * across[1],
    ];
    let rs = [
        neck[0] - shoulder_w * across[0],
        neck[1] - shoulder_w * across[1],
    ];
    let lh = [hip_w * across[0], hip_w * across[1]];
    let rh = [-hip_w * across[0], -hip_w * across[1]];

    let mut arm = |s: [f64; 2], side: f64| {
        let a1 = side * rng.gen_range(-0.3..2.6) + lean;
        let a2 = a1 + side * rng.gen_range(-0.2..2.0);
        let e = offset(s, rng.gen_range(0.14..0.17), a1);
        let w = offset(e, rng.gen_range(0.12..0.15), a2);
        (e, w)
    };
    let (le, lw) = arm(ls, -1.0);
    let (re, rw) = arm(rs, 1.0);
    let mut leg = |h: [f64; 2], side: f64| {
        let a1 = side * rng.gen_range(-0.25..0.7);
        let a2 = a1 - side * rng.gen_range(-0.1..1.0);
        let k = offset(h, rng.gen_range(0.2..0.24), a1);
        let a = offset(k, rng.gen_range(0.2..0.23), a2);
        (k, a)
    };
    let (lk, la) = leg(lh, -1.0);
    let (rk, ra) = leg(rh, 1.0);

    let head_dir = lean + Normal::new(0.0, 0.15).unwrap().sample(rng);
    let head = offset(neck, -(0.05 + head_r), head_dir);
    let turn = rng.gen_range(-0.4..0.4) * head_r;
    let face = |dx: f64, dy: f64| {
        let d = rot([dx + turn, dy], head_dir);
        [head[0] + d[0], head[1] + d[1]]
    };
    let nose = face(0.0, 0.15 * head_r);
    let leye = face(0.45 * head_r, -0.3 * head_r);
    let reye = face(-0.45 * head_r, -0.3 * head_r);
    let lear = face(0.95 * head_r * yaw, -0.05 * head_r);
    let rear = face(-0.95 * head_r * yaw, -0.05 * head_r);

    (
        [
            nose, leye, reye, lear, rear, ls, rs, le, re, lw, rw, lh, rh, lk, rk, la, ra,
        ],
        head_r,
    )
}

fn stamp_disc(img: &mut ImageTensor, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let (h, w) = (img.height as i64, img.width as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r + 1e-9 {
                for (c, v) in color.iter().enumerate().take(img.channels) {
                    img.set(y as usize, x as usize, c, *v);
                }
            }
        }
    }
}

fn stamp_segment(
    img: &mut ImageTensor,
    a: [f64; 2],
    b: [f64; 2],
    half_width: f64,
    color: [f64; 3],
) {
    let (h, w) = (img.height as i64, img.width as i64);
    let x0 = (a[0].min(b[0]) - half_width).floor() as i64;
    let x1 = (a[0].max(b[0]) + half_width).ceil() as i64;
    let y0 = (a[1].min(b[1]) - half_width).floor() as i64;
    let y1 = (a[1].max(b[1]) + half_width).ceil() as i64;
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let p = [x as f64 - a[0], y as f64 - a[1]];
            let t = if len2 > 0.0 {
                ((p[0] * d[0] + p[1] * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [p[0] - t * d[0], p[1] - t * d[1]];
            if q[0] * q[0] + q[1] * q[1] <= half_width * half_width {
                for (c, v) in color.iter().enumerate().take(img.channels) {
                    img.set(y as usize, x as usize, c, *v);
                }
            }
        }
    }
}

fn background(img: &mut ImageTensor, rng: &mut ChaCha8Rng) {
    let base: f64 = rng.gen_range(0.3..0.55);
    let tint: [f64; 3] = [
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.02..0.07),
            )
        })
        .collect();
    for y in 0..img.height {
        for x in 0..img.width {
            let mut v = base;
            for &(f, dir, phase, amp) in &waves {
                v += amp * (f * (x as f64 * dir.cos() + y as f64 * dir.sin()) + phase).sin();
            }
            let noise: f64 = rng.gen_range(-0.03..0.03);
            for c in 0..img.channels {
                img.set(y, x, c, (v + noise + tint[c % 3]).clamp(0.0, 1.0));
            }
        }
    }
}

/// Renders the figure for `seed` at the configured input size. Deterministic in `seed`.
pub fn synth_sample(seed: u64, cfg: &ModelConfig) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut img = ImageTensor::filled(cfg.height, cfg.width, cfg.channels, 0.0);
    background(&mut img, &mut rng);

    let (unit, head_r) = pose(&mut rng);
    let lo = unit
        .iter()
        .fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
    let hi = unit.iter().fold([f64::NEG_INFINITY; 2], |m, p| {
        [m[0].max(p[0]), m[1].max(p[1])]
    });
    let (ext_w, ext_h) = (hi[0] - lo[0], hi[1] - lo[1]);
    let avail = (w - 1.0 - 2.0 * MARGIN, h - 1.0 - 2.0 * MARGIN);
    let fit = (avail.0 / ext_w).min(avail.1 / ext_h);
    let scale = fit * rng.gen_range(0.75..1.0);
    let slack = (avail.0 - scale * ext_w, avail.1 - scale * ext_h);
    let ox = MARGIN + rng.gen_range(0.0..=slack.0) - scale * lo[0];
    let oy = MARGIN + rng.gen_range(0.0..=slack.1) - scale * lo[1];
    let pts: Vec<[f64; 2]> = unit
        .iter()
        .map(|p| [ox + scale * p[0], oy + scale * p[1]])
        .collect();

    let limb_w = (scale * 0.02).max(0.7);
    for (k, &(a, b)) in SKELETON.iter().enumerate() {
        let shade = 0.25 + 0.5 * k as f64 / SKELETON.len() as f64;
        stamp_segment(
            &mut img,
            pts[a],
            pts[b],
            limb_w,
            hsv(0.08 + 0.5 * shade, 0.25, shade),
        );
    }
    let neck = [(pts[5][0] + pts[6][0]) / 2.0, (pts[5][1] + pts[6][1]) / 2.0];
    let head = [(pts[3][0] + pts[4][0]) / 2.0, (pts[3][1] + pts[4][1]) / 2.0];
    stamp_segment(&mut img, neck, head, limb_w, hsv(0.1, 0.3, 0.7));
    stamp_disc(
        &mut img,
        head[0],
        head[1],
        scale * head_r,
        hsv(0.07, 0.35, 0.85),
    );

    let pix: Vec<(i64, i64)> = pts
        .iter()
        .map(|p| (p[0].round() as i64, p[1].round() as i64))
        .collect();
    for (j, &(x, y)) in pix.iter().enumerate() {
        stamp_disc(&mut img, x as f64, y as f64, JOINT_RADIUS, joint_color(j));
    }
    // a joint is hidden if a later stamp covers its own pixel
    let mut visible: Vec<bool> = (0..COCO_KEYPOINTS)
        .map(|j| {
            pix[j + 1..].iter().all(|&(x, y)| {
                ((x - pix[j].0).pow(2) + (y - pix[j].1).pow(2)) as f64 > JOINT_RADIUS * JOINT_RADIUS
            })
        })
        .collect();

    if rng.gen_bool(0.3) {
        let ow = rng.gen_range(0.15..0.3) * w;
        let oh = rng.gen_range(0.1..0.25) * h;
        let x0 = rng.gen_range(0.0..w - ow);
        let y0 = rng.gen_range(0.0..h - oh);
        let shade: f64 = rng.gen_range(0.2..0.6);
        for y in y0.ceil() as usize..(y0 + oh).floor() as usize {
            for x in x0.ceil() as usize..(x0 + ow).floor() as usize {
                for c in 0..img.channels {
                    img.set(y, x, c, shade);
                }
            }
        }
        let inside =
            |v: i64, a: f64, len: f64| v >= a.ceil() as i64 && v < (a + len).floor() as i64;
        for (j, &(x, y)) in pix.iter().enumerate() {
            if inside(x, x0, ow) && inside(y, y0, oh) {
                visible[j] = false;
            }
        }
    }

    let keypoints: Vec<Keypoint> = pts
        .iter()
        .zip(&visible)
        .map(|(p, &vis)| Keypoint {
            x: p[0],
            y: p[1],
            v: if vis { 2 } else { 1 },
        })
        .collect();
    let area = (scale * ext_w).max(1.0) * (scale * ext_h).max(1.0);
    let gt_heatmaps = HeatmapSet::new(
        gt_heatmaps(&keypoints, cfg)?,
        Stage::Coarse,
        (cfg.height, cfg.width),
    )?;
    Ok(SynthSample {
        seed,
        image: img,
        keypoints,
        area,
        gt_heatmaps,
    })
}

/// Samples for seeds `first_seed..first_seed + n`, rendered across worker threads.
pub fn synth_dataset(first_seed: u64, n: usize, cfg: &ModelConfig) -> Result<Vec<SynthSample>> {
    let workers = thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(n.max(1));
    let chunk = n.div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<Vec<SynthSample>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(n);
                s.spawn(move || {
                    (start..end)
                        .map(|i| synth_sample(first_seed + i as u64, cfg))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("synth worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
