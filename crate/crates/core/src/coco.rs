//! COCO person-keypoint annotations and top-down crops.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::{ModelConfig, COCO_KEYPOINTS};
use crate::error::{Error, Result};
use crate::image::{read_pnm, ImageTensor};
use crate::metrics::Keypoint;
use crate::training::Annotated;

/// Bounding boxes are enlarged by this factor after aspect correction.
pub const CROP_PADDING: f64 = 1.25;

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    area: f64,
    keypoints: Vec<f64>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoInstance {
    pub annotation_id: u64,
    pub image_id: u64,
    pub file_name: String,
    /// `[x, y, w, h]` in image pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub keypoints: Vec<Keypoint>,
}

/// Axis-aligned crop window in source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub fn parse_coco_annotations(text: &str) -> Result<Vec<CocoInstance>> {
    let file: CocoFile = serde_json::from_str(text)?;
    let names: HashMap<u64, &str> = file
        .images
        .iter()
        .map(|i| (i.id, i.file_name.as_str()))
        .collect();
    let mut out = Vec::new();
    for a in file.annotations.iter().filter(|a| a.iscrowd == 0) {
        if a.keypoints.len() != 3 * COCO_KEYPOINTS {
            return Err(Error::Format {
                what: "coco annotation",
                detail: format!(
                    "annotation {} has {} keypoint values",
                    a.id,
                    a.keypoints.len()
                ),
            });
        }
        let file_name = names.get(&a.image_id).ok_or_else(|| Error::Format {
            what: "coco annotation",
            detail: format!("annotation {} refers to unknown image {}", a.id, a.image_id),
        })?;
        let keypoints = a
            .keypoints
            .chunks_exact(3)
            .map(|t| Keypoint {
                x: t[0],
                y: t[1],
                v: t[2].clamp(0.0, 2.0) as u8,
            })
            .collect();
        out.push(CocoInstance {
            annotation_id: a.id,
            image_id: a.image_id,
            file_name: file_name.to_string(),
            bbox: a.bbox,
            area: a.area,
            keypoints,
        });
    }
    Ok(out)
}

pub fn ingest_coco_annotations(path: &Path) -> Result<Vec<CocoInstance>> {
    parse_coco_annotations(&std::fs::read_to_string(path)?)
}

/// Expands `bbox` about its center to width/height ratio `aspect`, then pads.
pub fn crop_rect(bbox: [f64; 4], aspect: f64) -> CropRect {
    let [x, y, w, h] = bbox;
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    let (w, h) = if w > aspect * h {
        (w, w / aspect)
    } else {
        (h * aspect, h)
    };
    let (w, h) = (w * CROP_PADDING, h * CROP_PADDING);
    CropRect {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
    }
}

/// Bilinear crop of `rect` resized to `out_h × out_w`; outside the source is black.
pub fn crop_and_resize(
    img: &ImageTensor,
    rect: CropRect,
    out_h: usize,
    out_w: usize,
) -> ImageTensor {
    let sx = rect.w / out_w as f64;
    let sy = rect.h / out_h as f64;
    let mut out = ImageTensor::filled(out_h, out_w, img.channels, 0.0);
    let get = |y: i64, x: i64, c: usize| {
        if y < 0 || x < 0 || y >= img.height as i64 || x >= img.width as i64 {
            0.0
        } else {
            img.at(y as usize, x as usize, c)
        }
    };
    for i in 0..out_h {
        let fy = rect.y + (i as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        for j in 0..out_w {
            let fx = rect.x + (j as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let (y0, x0) = (y0 as i64, x0 as i64);
            for c in 0..img.channels {
                let top = get(y0, x0, c) * (1.0 - tx) + get(y0, x0 + 1, c) * tx;
                let bot = get(y0 + 1, x0, c) * (1.0 - tx) + get(y0 + 1, x0 + 1, c) * tx;
                out.set(i, j, c, top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// Maps a source-image point into a crop of `out_h × out_w`.
pub fn to_crop(x: f64, y: f64, rect: CropRect, out_h: usize, out_w: usize) -> (f64, f64) {
    let sx = rect.w / out_w as f64;
    let sy = rect.h / out_h as f64;
    ((x - rect.x + 0.5) / sx - 0.5, (y - rect.y + 0.5) / sy - 0.5)
}

/// One cropped, resized instance ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoSample {
    pub instance: CocoInstance,
    pub rect: CropRect,
    pub image: ImageTensor,
    /// Keypoints in crop coordinates; labels outside the crop are dropped to `v = 0`.
    pub keypoints: Vec<Keypoint>,
    pub area: f64,
}

impl Annotated for CocoSample {
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

fn image_path(dir: &Path, file_name: &str) -> Option<PathBuf> {
    let stem = Path::new(file_name).file_stem()?;
    ["ppm", "pgm", "pnm"]
        .iter()
        .map(|ext| dir.join(stem).with_extension(ext))
        .find(|p| p.exists())
}

pub fn prepare_sample(
    inst: &CocoInstance,
    img: &ImageTensor,
    cfg: &ModelConfig,
) -> Result<CocoSample> {
    let img = match (img.channels, cfg.channels) {
        (a, b) if a == b => img.clone(),
        (1, 3) => {
            let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
            ImageTensor::new(img.height, img.width, 3, data)?
        }
        (a, b) => {
            return Err(Error::Config(format!(
                "image has {a} channels, model expects {b}"
            )));
        }
    };
    let rect = crop_rect(inst.bbox, cfg.width as f64 / cfg.height as f64);
    let image = crop_and_resize(&img, rect, cfg.height, cfg.width);
    let keypoints = inst
        .keypoints
        .iter()
        .map(|k| {
            let (x, y) = to_crop(k.x, k.y, rect, cfg.height, cfg.width);
            let inside = x >= 0.0 && y >= 0.0 && x < cfg.width as f64 && y < cfg.height as f64;
            Keypoint {
                x,
                y,
                v: if inside { k.v } else { 0 },
            }
        })
        .collect();
    let area = inst.area * (cfg.width as f64 / rect.w) * (cfg.height as f64 / rect.h);
    Ok(CocoSample {
        instance: inst.clone(),
        rect,
        image,
        keypoints,
        area: area.max(1.0),
    })
}

/// Crops every instance whose image exists under `image_dir` as PNM; others are skipped.
pub fn load_coco_samples(
    instances: &[CocoInstance],
    image_dir: &Path,
    cfg: &ModelConfig,
) -> Result<Vec<CocoSample>> {
    let mut cache: HashMap<u64, ImageTensor> = HashMap::new();
    let mut out = Vec::new();
    for inst in instances {
        let Some(path) = image_path(image_dir, &inst.file_name) else {
            log::warn!("no PNM image for {}, skipping", inst.file_name);
            continue;
        };
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(inst.image_id) {
            e.insert(read_pnm(&path)?);
        }
        out.push(prepare_sample(inst, &cache[&inst.image_id], cfg)?);
    }
    Ok(out)
}
