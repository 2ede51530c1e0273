use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use sparse_pose_core::coco::{
    crop_and_resize, ingest_coco_annotations, load_coco_samples, CropRect,
};
use sparse_pose_core::decoder::{intermediate_response, Stage};
use sparse_pose_core::eval::{run_outcomes, summarize, sweep, sweep_csv, SWEEP_THRESHOLDS};
use sparse_pose_core::flops::flops_estimate;
use sparse_pose_core::image::{read_pnm, write_pgm16, write_pnm};
use sparse_pose_core::metrics::{COCO_KAPPAS, SYNTH_KAPPA};
use sparse_pose_core::runconfig::DataSource;
use sparse_pose_core::synth::synth_dataset;
use sparse_pose_core::training::{epoch_log_csv, EpochLog, Trainer};
use sparse_pose_core::{Checkpoint, Error, Graph, ImageTensor, Model, ModelConfig, RunConfig};

use crate::RunArgs;

pub const CHECKPOINT_FILE: &str = "checkpoint.shrp";
pub const METRICS_FILE: &str = "metrics.csv";

/// Invalid invocation or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            match err {
                Error::Config(_) | Error::UnknownKey(_) => return 2,
                Error::Format { what: "config", .. } => return 2,
                _ => {}
            }
        }
    }
    1
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Config file (or the toy preset), then `--profile`, then the remaining flags.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.profile {
        run.apply_profile(p)?;
    }
    apply_flags(&mut run, args);
    run.validate()?;
    Ok(run)
}

fn apply_flags(run: &mut RunConfig, args: &RunArgs) {
    if let Some(s) = args.seed {
        run.seed = s;
    }
    if let Some(q) = args.q_thres {
        run.model.q_thres = q;
    }
    if let Some(a) = args.alpha {
        run.model.alpha = a;
    }
    if let Some(o) = &args.out {
        run.out_dir = o.clone();
    }
}

/// Loads a checkpoint and merges the command-line settings. Only runtime
/// settings (threshold, alpha, data source, output) may differ from the
/// checkpoint's architecture.
fn resolve_with_checkpoint(args: &RunArgs, path: &Path) -> Result<(RunConfig, Model)> {
    let ckpt =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (saved, mut model) = ckpt.to_model()?;
    let mut run = saved.clone();
    if let Some(p) = &args.config {
        let file = RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?;
        let arch = |c: &ModelConfig| {
            let mut c = c.clone();
            c.alpha = 0.0;
            c.q_thres = 0.0;
            c
        };
        if arch(&file.model) != arch(&saved.model) {
            return Err(usage(format!(
                "config {} does not match the checkpoint architecture",
                p.display()
            )));
        }
        run = RunConfig {
            model: file.model.clone(),
            ..file
        };
    }
    if let Some(p) = &args.profile {
        if *p != saved.profile {
            return Err(usage(format!(
                "profile {p} does not match checkpoint profile {}",
                saved.profile
            )));
        }
    }
    apply_flags(&mut run, args);
    run.validate()?;
    model.cfg.alpha = run.model.alpha;
    model.cfg.q_thres = run.model.q_thres;
    model.quality.threshold = run.model.q_thres;
    Ok((run, model))
}

fn out_dir(run: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&run.out_dir)
        .with_context(|| format!("creating {}", run.out_dir.display()))?;
    Ok(run.out_dir.clone())
}

pub fn train(args: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let (run, mut trainer) = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)
                .with_context(|| format!("loading checkpoint {}", p.display()))?;
            let (mut run, trainer) = ckpt.to_trainer()?;
            if let Some(o) = &args.out {
                run.out_dir = o.clone();
            }
            (run, trainer)
        }
        None => {
            let run = resolve(args)?;
            let model = Model::new(run.model.clone(), run.seed)?;
            let trainer = Trainer::new(model, run.train.clone(), run.seed)?;
            (run, trainer)
        }
    };
    if run.dataset != DataSource::Synthetic {
        return Err(usage("training supports dataset=synthetic only"));
    }
    let dir = out_dir(&run)?;
    fs::write(dir.join("config.txt"), run.to_text())?;
    let t = &run.train;
    log::info!(
        "rendering {} training and {} validation samples",
        t.train_samples,
        t.val_samples
    );
    let data = synth_dataset(t.data_seed, t.train_samples, &run.model)?;
    let val = synth_dataset(
        t.data_seed + t.train_samples as u64,
        t.val_samples,
        &run.model,
    )?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut log_text = match (resume, fs::read_to_string(&metrics_path)) {
        (Some(_), Ok(existing)) => existing,
        _ => epoch_log_csv(&[]),
    };
    let mut last: Option<EpochLog> = None;
    while !trainer.is_done() {
        let row = trainer.run_epoch(&data, &val)?;
        let line = epoch_log_csv(std::slice::from_ref(&row));
        log_text.push_str(line.lines().nth(1).unwrap_or_default());
        log_text.push('\n');
        fs::write(&metrics_path, &log_text)?;
        Checkpoint::from_trainer(&trainer, &run).save(&dir.join(CHECKPOINT_FILE))?;
        last = Some(row);
    }
    match last {
        Some(r) => println!(
            "trained {} epochs: l_heatmap {:.6} l_qp {:.6} eval_error {:.4}",
            trainer.epoch, r.l_heatmap, r.l_qp, r.eval_error
        ),
        None => println!(
            "nothing to do: checkpoint already at epoch {}",
            trainer.epoch
        ),
    }
    println!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn eval(args: &RunArgs, checkpoint: &Path, samples: Option<usize>) -> Result<()> {
    let (run, model) = resolve_with_checkpoint(args, checkpoint)?;
    let dir = out_dir(&run)?;
    let cfg = &model.cfg;
    let (text, sweep_rows, summary_json) = match run.dataset {
        DataSource::Synthetic => {
            let n = samples.unwrap_or(run.train.val_samples).max(1);
            let data = synth_dataset(run.train.data_seed + run.train.train_samples as u64, n, cfg)?;
            let kappas = vec![SYNTH_KAPPA; cfg.keypoints];
            let outcomes = run_outcomes(&model, &data)?;
            let s = summarize(&outcomes, &data, cfg.q_thres, &kappas, cfg)?;
            let rows = sweep(&outcomes, &data, &SWEEP_THRESHOLDS, &kappas, cfg)?;
            (s.to_text(), rows, serde_json::to_string_pretty(&s)?)
        }
        DataSource::Coco => {
            let ann = run.coco_annotations.as_ref().expect("validated");
            let images = run
                .coco_images
                .as_ref()
                .ok_or_else(|| usage("dataset=coco requires coco_images"))?;
            if cfg.keypoints != COCO_KAPPAS.len() {
                return Err(usage("COCO evaluation needs a 17-keypoint model"));
            }
            let instances = ingest_coco_annotations(ann)?;
            let mut data = load_coco_samples(&instances, images, cfg)?;
            if let Some(n) = samples {
                data.truncate(n);
            }
            if data.is_empty() {
                bail!("no COCO instances with readable images");
            }
            let outcomes = run_outcomes(&model, &data)?;
            let s = summarize(&outcomes, &data, cfg.q_thres, &COCO_KAPPAS, cfg)?;
            let rows = sweep(&outcomes, &data, &SWEEP_THRESHOLDS, &COCO_KAPPAS, cfg)?;
            (s.to_text(), rows, serde_json::to_string_pretty(&s)?)
        }
    };
    fs::write(dir.join("eval_report.txt"), &text)?;
    fs::write(dir.join("eval_summary.json"), summary_json)?;
    fs::write(dir.join("eval_sweep.csv"), sweep_csv(&sweep_rows))?;
    print!("{text}");
    println!("sweep: {}", dir.join("eval_sweep.csv").display());
    Ok(())
}

/// Reads a PNM image and brings it to the model's input size. Returns the
/// model input and the factors mapping input pixels back to the source.
fn load_input(path: &Path, cfg: &ModelConfig) -> Result<(ImageTensor, (f64, f64))> {
    let img = read_pnm(path).with_context(|| format!("reading image {}", path.display()))?;
    let img = match (img.channels, cfg.channels) {
        (a, b) if a == b => img,
        (1, 3) => {
            let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
            ImageTensor::new(img.height, img.width, 3, data)?
        }
        (a, b) => bail!("image has {a} channels, model expects {b}"),
    };
    if (img.height, img.width) == (cfg.height, cfg.width) {
        return Ok((img, (1.0, 1.0)));
    }
    let rect = CropRect {
        x: 0.0,
        y: 0.0,
        w: img.width as f64,
        h: img.height as f64,
    };
    let sx = img.width as f64 / cfg.width as f64;
    let sy = img.height as f64 / cfg.height as f64;
    Ok((crop_and_resize(&img, rect, cfg.height, cfg.width), (sx, sy)))
}

pub fn infer(args: &RunArgs, checkpoint: &Path, image: &Path) -> Result<()> {
    let (run, model) = resolve_with_checkpoint(args, checkpoint)?;
    let dir = out_dir(&run)?;
    let (input, (sx, sy)) = load_input(image, &model.cfg)?;
    let result = model.infer(&input)?;
    let pose = &result.pose;
    let mut flat = Vec::with_capacity(3 * pose.keypoints.len());
    for (p, s) in pose.keypoints.iter().zip(&pose.scores) {
        let [x, y] = if (sx, sy) == (1.0, 1.0) {
            *p
        } else {
            [(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5]
        };
        flat.extend_from_slice(&[x, y, *s]);
    }
    let mut maps = Vec::new();
    for set in std::iter::once(&result.coarse).chain(result.fine.as_ref()) {
        for (i, (path, q)) in set
            .export_pgm(&dir, set.stage.as_str())?
            .into_iter()
            .enumerate()
        {
            maps.push(json!({
                "stage": set.stage.as_str(),
                "keypoint": i,
                "file": path.file_name().map(|f| f.to_string_lossy().into_owned()),
                "min": q.min,
                "max": q.max,
            }));
        }
    }
    let doc = json!({
        "image": image.display().to_string(),
        "category_id": 1,
        "keypoints": flat,
        "score": pose.score(),
        "stage_used": pose.stage_used.as_str(),
        "quality": result.quality,
        "q_thres": model.cfg.q_thres,
        "heatmaps": maps,
    });
    let out = dir.join("pose.json");
    fs::write(&out, serde_json::to_string_pretty(&doc)?)?;
    println!(
        "stage {} quality {:.4} -> {}",
        pose.stage_used.as_str(),
        result.quality,
        out.display()
    );
    Ok(())
}

pub fn flops(args: &RunArgs, coarse_only: bool) -> Result<()> {
    let run = resolve(args)?;
    let cfg = &run.model;
    println!(
        "profile {} ({}x{}, D={}, alpha={}), multiply-accumulates counted once",
        run.profile, cfg.height, cfg.width, cfg.dim, cfg.alpha
    );
    let b = flops_estimate(cfg, !coarse_only);
    println!("{b}");
    if !coarse_only {
        println!(
            "coarse-only total {:.3} GFLOPs",
            flops_estimate(cfg, false).gflops()
        );
    }
    Ok(())
}

pub fn visualize(args: &RunArgs, checkpoint: &Path, image: &Path) -> Result<()> {
    let (run, model) = resolve_with_checkpoint(args, checkpoint)?;
    let dir = out_dir(&run)?;
    let cfg = &model.cfg;
    let (input, _) = load_input(image, cfg)?;
    let mut g = Graph::new(&model.store);
    let coarse = model.coarse_pass(&mut g, &input, true)?;
    let fine = model.fine_pass(&mut g, &input, &coarse)?;
    let sel = &fine.selection;
    fs::write(dir.join("scores.csv"), sel.to_csv())?;
    fs::write(
        dir.join("parent_map.csv"),
        fine.composition.parent_map_csv(),
    )?;

    let (rows, cols) = cfg.coarse_grid();
    let mask: Vec<f64> = (0..rows * cols)
        .map(|i| f64::from(u8::from(sel.is_selected(i))))
        .collect();
    write_pgm16(&dir.join("mask.pgm"), rows, cols, &mask)?;

    let mut overlay = input.clone();
    let (ph, pw) = (cfg.height / rows, cfg.width / cols);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            if !sel.is_selected((y / ph) * cols + x / pw) {
                for c in 0..overlay.channels {
                    let v = overlay.at(y, x, c);
                    overlay.set(y, x, c, v * 0.35);
                }
            }
        }
    }
    write_pnm(&dir.join("selection.ppm"), &overlay)?;

    let seq = &coarse.encoded.sequence;
    let (hr, hc) = cfg.heatmap_size();
    for l in 1..=cfg.depth {
        let maps = intermediate_response(
            &mut g,
            &coarse.encoded.layer_outputs,
            seq.n_visual,
            seq.n_keypoints,
            &model.decoder,
            l,
            Stage::Coarse,
            cfg,
        )?;
        write_pgm16(
            &dir.join(format!("layer_{l:02}.pgm")),
            hr,
            hc,
            &maps.max_projection(),
        )?;
    }
    println!(
        "{} of {} patches selected; outputs in {}",
        sel.n_high(),
        rows * cols,
        dir.display()
    );
    Ok(())
}
