//! Raster images in unit range, PNG/PPM I/O, bicubic resampling and metrics.
//!
//! Values are stored as row-major `f64` code values divided by 255; no gamma
//! transform is applied anywhere.

use std::path::Path;

use image::{ColorType, ExtendedColorType, ImageFormat};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("image dimensions must be positive"));
        }
        if channels == 0 {
            return Err(Error::contract("image must have at least one channel"));
        }
        if data.len() != width * height * channels {
            return Err(Error::contract(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite sample at index {bad}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Result<Self> {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(width * height * value.len())
            .collect();
        Self::new(width, height, value.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Per-channel mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = (self.width * self.height) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Quantize to 8-bit codes: clamp to [0, 1], then round half away from
    /// zero on `v * 255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, codes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            codes.iter().map(|&c| f64::from(c) / 255.0).collect(),
        )
    }
}

pub fn quantize(v: f64) -> u8 {
    // f64::round rounds half away from zero
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decode a PNG or PNM file. Grayscale sources load with one channel,
/// everything else with three (alpha is dropped).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
    let decoded = reader.decode().map_err(|e| Error::Image {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded.color() {
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
            ImageBuffer::from_u8(w, h, 1, decoded.to_luma8().as_raw())
        }
        _ => ImageBuffer::from_u8(w, h, 3, decoded.to_rgb8().as_raw()),
    }
}

/// Encode as PNG, or as binary PPM when the extension is `.ppm`/`.pnm`.
pub fn save_image(buf: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let (w, h) = (buf.width as u32, buf.height as u32);
    let codes = buf.to_u8();
    let result = match ext.as_deref() {
        Some("ppm") | Some("pnm") => {
            let rgb: Vec<u8> = match buf.channels {
                3 => codes,
                1 => codes.iter().flat_map(|&c| [c, c, c]).collect(),
                n => return Err(Error::contract(format!("cannot write {n} channels as PPM"))),
            };
            write_ppm(path, &rgb, w, h)
        }
        _ => {
            let color = match buf.channels {
                1 => ExtendedColorType::L8,
                3 => ExtendedColorType::Rgb8,
                n => return Err(Error::contract(format!("cannot write {n} channels as PNG"))),
            };
            image::save_buffer_with_format(path, &codes, w, h, color, ImageFormat::Png)
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_owned(),
            source,
        },
        other => Error::Image {
            path: path.to_owned(),
            reason: other.to_string(),
        },
    })
}

fn write_ppm(path: &Path, rgb: &[u8], w: u32, h: u32) -> image::ImageResult<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;

    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut writer)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(rgb, w, h, ExtendedColorType::Rgb8)?;
    std::io::Write::flush(&mut writer)?;
    Ok(())
}

/// Catmull-Rom cubic (a = -0.5).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Resampling weights for one output coordinate: (first input index, weights).
/// Input indices are clamped at the borders.
fn axis_weights(len_in: usize, len_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = len_in as f64 / len_out as f64;
    // the kernel is stretched when shrinking so it also acts as the low-pass
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..len_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for k in lo..=hi {
                let w = cubic((k as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = k.clamp(0, len_in as isize - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(tap) => tap.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable Catmull-Rom resampling to an arbitrary size, pixel-center
/// aligned. When shrinking, the kernel is widened by the scale factor.
pub fn resize_bicubic(buf: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    if width == 0 || height == 0 {
        return Err(Error::domain("resampled image would be empty"));
    }
    let ch = buf.channels;
    let xw = axis_weights(buf.width, width);
    let yw = axis_weights(buf.height, height);

    let mut rows = vec![0.0; buf.height * width * ch];
    for r in 0..buf.height {
        for (o, taps) in xw.iter().enumerate() {
            let out = &mut rows[(r * width + o) * ch..(r * width + o + 1) * ch];
            for &(k, w) in taps {
                for (acc, v) in out.iter_mut().zip(buf.pixel(r, k)) {
                    *acc += w * v;
                }
            }
        }
    }

    let mut data = vec![0.0; height * width * ch];
    for (o, taps) in yw.iter().enumerate() {
        for c in 0..width {
            let out = &mut data[(o * width + c) * ch..(o * width + c + 1) * ch];
            for &(k, w) in taps {
                let src = &rows[(k * width + c) * ch..(k * width + c + 1) * ch];
                for (acc, v) in out.iter_mut().zip(src) {
                    *acc += w * v;
                }
            }
        }
    }
    ImageBuffer::new(width, height, ch, data)
}

/// Bicubic downsampling by `factor > 1` to `round(dims / factor)`.
pub fn bicubic_downsample(buf: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    if !(factor > 1.0) {
        return Err(Error::domain(format!("downsampling factor must exceed 1, got {factor}")));
    }
    let w = (buf.width as f64 / factor).round() as usize;
    let h = (buf.height as f64 / factor).round() as usize;
    if w < 1 || h < 1 {
        return Err(Error::domain(format!(
            "downsampling {}x{} by {factor} leaves no pixels",
            buf.width, buf.height
        )));
    }
    resize_bicubic(buf, w, h)
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::contract(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mae(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range data. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// BT.601 luma in the studio-swing convention common in super-resolution
/// benchmarks (`16/255 + (65.481 R + 128.553 G + 24.966 B) / 255`).
pub fn luma(buf: &ImageBuffer) -> Result<ImageBuffer> {
    if buf.channels != 3 {
        return Err(Error::contract("luma requires an RGB image"));
    }
    let data = buf
        .data
        .chunks_exact(3)
        .map(|p| (16.0 + 65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]) / 255.0)
        .collect();
    ImageBuffer::new(buf.width, buf.height, 1, data)
}

/// PSNR on the luminance channel.
pub fn psnr_y(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    psnr(&luma(a)?, &luma(b)?)
}
