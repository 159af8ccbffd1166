use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelOrder {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "BGR")]
    Bgr,
}

/// Range 8-bit pixel values are mapped to before mean/std normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

/// Per-backbone preprocessing contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub height: usize,
    pub width: usize,
    pub means: [f32; 3],
    pub stds: [f32; 3],
    pub channel_order: ChannelOrder,
    pub value_range: ValueRange,
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid(format!(
                "preprocess target dims must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if self.stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid(format!(
                "preprocess stds must be strictly positive, got {:?}",
                self.stds
            )));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invalid("preprocess means must be finite".into()));
        }
        Ok(())
    }

    fn scale(&self, v: f32) -> f32 {
        match self.value_range {
            ValueRange::Unit => v / 255.0,
            ValueRange::Symmetric => v / 127.5 - 1.0,
        }
    }
}

/// A preprocessed image, row-major `(height, width, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimMismatch(format!(
                "tensor data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("tensor contains non-finite values".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at `(y, x, c)`.
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Decodes a PNG or JPEG file and preprocesses it per `spec`.
pub fn load_image(path: impl AsRef<Path>, spec: &PreprocessSpec) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path, spec)
}

pub(crate) fn decode_image(bytes: &[u8], path: &Path, spec: &PreprocessSpec) -> Result<ImageTensor> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "zero-area image".into(),
        });
    }
    // to_rgb8 down-converts 16-bit and float sources.
    preprocess(&decoded.to_rgb8(), spec)
}

/// Bilinear resize (half-pixel centers, no antialiasing prefilter), channel
/// reorder, value scaling, then per-channel `(x - mean) / std`.
pub fn preprocess(img: &RgbImage, spec: &PreprocessSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    if in_w == 0 || in_h == 0 {
        return Err(Error::Invalid("zero-area image".into()));
    }
    let (out_h, out_w) = (spec.height, spec.width);
    let xs = sample_grid(in_w, out_w);
    let ys = sample_grid(in_h, out_h);
    let order: [usize; 3] = match spec.channel_order {
        ChannelOrder::Rgb => [0, 1, 2],
        ChannelOrder::Bgr => [2, 1, 0],
    };

    let px = |x: usize, y: usize, c: usize| img.get_pixel(x as u32, y as u32)[c] as f32;
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for (out_c, &src_c) in order.iter().enumerate() {
                let top = lerp(px(x0, y0, src_c), px(x1, y0, src_c), tx);
                let bottom = lerp(px(x0, y1, src_c), px(x1, y1, src_c), tx);
                let v = spec.scale(lerp(top, bottom, ty));
                data.push((v - spec.means[out_c]) / spec.stds[out_c]);
            }
        }
    }
    ImageTensor::new(out_h, out_w, 3, data)
}

// a + (b - a) t is exact when a == b, so constant regions stay constant.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn sample_grid(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}
