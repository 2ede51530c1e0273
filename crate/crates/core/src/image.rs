//! Dense `H×W×C` images, bilinear resampling, patch splitting and PNM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `H×W×C` samples.
    pub data: Vec<f64>,
    /// Nominal value range of the samples, e.g. `(0, 1)`.
    pub range: (f64, f64),
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err(
                "ImageTensor::new",
                format!("{height}x{width}x{channels} vs {} samples", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            range: (0.0, 1.0),
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            range: (0.0, 1.0),
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// `(v - mean) / std` on every sample.
    pub fn normalized(&self, mean: f64, std: f64) -> Self {
        let data = self.data.iter().map(|v| (v - mean) / std).collect();
        Self {
            data,
            range: ((self.range.0 - mean) / std, (self.range.1 - mean) / std),
            ..*self
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.clone(),
        )
        .expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, c] => Self::new(*h, *w, *c, t.data().to_vec()),
            [h, w] => Self::new(*h, *w, 1, t.data().to_vec()),
            s => Err(shape_err("ImageTensor::from_tensor", format!("{s:?}"))),
        }
    }
}

/// Bilinear resampling by factor `s` with half-pixel centers:
/// output pixel `i` samples source position `(i + 0.5) / s - 0.5`, clamped to the border.
pub fn resample(img: &ImageTensor, s: f64) -> Result<ImageTensor> {
    let th = img.height as f64 * s;
    let tw = img.width as f64 * s;
    if s <= 0.0
        || (th - th.round()).abs() > 1e-9
        || (tw - tw.round()).abs() > 1e-9
        || th < 1.0
        || tw < 1.0
    {
        return Err(Error::Config(format!(
            "resample: {}x{} by {s} is not integral",
            img.height, img.width
        )));
    }
    if s == 1.0 {
        return Ok(img.clone());
    }
    let (oh, ow) = (th.round() as usize, tw.round() as usize);
    let c = img.channels;
    let axis = |i: usize, n: usize| -> (usize, usize, f64) {
        let src = ((i as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, img.height);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, img.width);
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
                let bot = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
                out[(y * ow + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(ImageTensor {
        height: oh,
        width: ow,
        channels: c,
        data: out,
        range: img.range,
    })
}

/// Splits into `(H/ph)·(W/pw)` patches in row-major grid order. Each patch is
/// flattened row-major over `(row, col, channel)`; the result is `[N × ph·pw·C]`.
pub fn patchify(img: &ImageTensor, ph: usize, pw: usize) -> Result<Tensor> {
    if ph == 0 || pw == 0 || !img.height.is_multiple_of(ph) || !img.width.is_multiple_of(pw) {
        return Err(shape_err(
            "patchify",
            format!("{}x{} not divisible by {ph}x{pw}", img.height, img.width),
        ));
    }
    let (gh, gw, c) = (img.height / ph, img.width / pw, img.channels);
    let pd = ph * pw * c;
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..ph {
                let o = ((gy * ph + y) * img.width + gx * pw) * c;
                out.extend_from_slice(&img.data[o..o + pw * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    channels: usize,
    ph: usize,
    pw: usize,
) -> Result<ImageTensor> {
    if !height.is_multiple_of(ph) || !width.is_multiple_of(pw) {
        return Err(shape_err("unpatchify", "divisibility"));
    }
    let (gh, gw) = (height / ph, width / pw);
    if patches.shape() != [gh * gw, ph * pw * channels] {
        return Err(shape_err("unpatchify", format!("{:?}", patches.shape())));
    }
    let mut img = ImageTensor::filled(height, width, channels, 0.0);
    for gy in 0..gh {
        for gx in 0..gw {
            let p = patches.row(gy * gw + gx);
            for y in 0..ph {
                let o = ((gy * ph + y) * width + gx * pw) * channels;
                img.data[o..o + pw * channels]
                    .copy_from_slice(&p[y * pw * channels..(y + 1) * pw * channels]);
            }
        }
    }
    Ok(img)
}

fn pnm_header(bytes: &[u8]) -> Result<(String, Vec<usize>, usize)> {
    // Magic plus three integers, separated by whitespace with `#` comments.
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(Error::Format {
                what: "PNM",
                detail: "truncated header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte before the raster
    i += 1;
    let nums = fields[1..]
        .iter()
        .map(|f| {
            f.parse::<usize>().map_err(|_| Error::Format {
                what: "PNM",
                detail: format!("bad header field `{f}`"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((fields[0].clone(), nums, i))
}

/// Reads binary PGM (`P5`) or PPM (`P6`), 8- or 16-bit, scaled to `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    decode_pnm(&bytes)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let (magic, nums, off) = pnm_header(bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => {
            return Err(Error::Format {
                what: "PNM",
                detail: format!("unsupported magic `{m}`"),
            })
        }
    };
    let (w, h, maxval) = (nums[0], nums[1], nums[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format {
            what: "PNM",
            detail: format!("maxval {maxval}"),
        });
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = w * h * channels;
    let raster = bytes.get(off..off + n * bps).ok_or_else(|| Error::Format {
        what: "PNM",
        detail: "truncated raster".into(),
    })?;
    let data = if bps == 1 {
        raster.iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        raster
            .chunks(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval as f64)
            .collect()
    };
    ImageTensor::new(h, w, channels, data)
}

/// Writes an 8-bit PGM/PPM, clamping samples from `[0, 1]`.
pub fn write_pnm(path: &Path, img: &ImageTensor) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(shape_err("write_pnm", format!("{c} channels"))),
    };
    let mut f = fs::File::create(path)?;
    write!(f, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let raster: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&raster)?;
    Ok(())
}

/// Min-max quantization used for 16-bit map exports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantization {
    pub min: f64,
    pub max: f64,
}

impl Quantization {
    pub fn dequantize(&self, q: u16) -> f64 {
        if self.max > self.min {
            self.min + q as f64 / 65535.0 * (self.max - self.min)
        } else {
            self.min
        }
    }
}

/// Writes a `rows × cols` map as a 16-bit PGM after min-max normalization to
/// `[0, 65535]`; a constant map is written as all zeros.
pub fn write_pgm16(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<Quantization> {
    let bytes = encode_pgm16(rows, cols, values)?;
    fs::write(path, &bytes.0)?;
    Ok(bytes.1)
}

pub fn encode_pgm16(rows: usize, cols: usize, values: &[f64]) -> Result<(Vec<u8>, Quantization)> {
    if values.len() != rows * cols {
        return Err(shape_err(
            "write_pgm16",
            format!("{rows}x{cols} vs {}", values.len()),
        ));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q = Quantization { min, max };
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in values {
        let level = if max > min {
            ((v - min) / (max - min) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok((out, q))
}

/// Reads a 16-bit PGM back to raw levels.
pub fn read_pgm16_levels(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (magic, nums, off) = pnm_header(bytes)?;
    if magic != "P5" || nums[2] != 65535 {
        return Err(Error::Format {
            what: "PGM16",
            detail: format!("magic {magic}, maxval {}", nums[2]),
        });
    }
    let (w, h) = (nums[0], nums[1]);
    let raster = bytes
        .get(off..off + 2 * w * h)
        .ok_or_else(|| Error::Format {
            what: "PGM16",
            detail: "truncated raster".into(),
        })?;
    let levels = raster
        .chunks(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((h, w, levels))
}
