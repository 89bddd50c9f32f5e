//! Image preprocessing and per-image class scores.

use std::fmt::Write as _;

use candle_core::{Device, Tensor};
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::model::InputShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Bilinear resize straight to the target size: no crop, no pad, aspect
    /// ratio not preserved.
    #[default]
    BilinearStretch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `x / 127.5 - 1`, mapping 8-bit pixels to [-1, 1].
    #[default]
    SymmetricUnit,
}

impl ValueRange {
    fn scale(self, v: f32) -> f32 {
        match self {
            ValueRange::SymmetricUnit => v / 127.5 - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub channels: usize,
    pub resize_mode: ResizeMode,
    pub value_range: ValueRange,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_height: 299,
            target_width: 299,
            channels: 3,
            resize_mode: ResizeMode::BilinearStretch,
            value_range: ValueRange::SymmetricUnit,
        }
    }
}

impl PreprocessConfig {
    /// Default preprocessing resized to a model's input shape.
    pub fn for_input(shape: InputShape) -> Self {
        PreprocessConfig {
            target_height: shape.height,
            target_width: shape.width,
            channels: shape.channels,
            ..Default::default()
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<DynamicImage> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Decode("zero-dimension image".into()));
        }
        Ok(img)
    }

    /// Decodes and preprocesses encoded image bytes into HWC pixel values.
    pub fn pixels_from_bytes(&self, bytes: &[u8]) -> Result<Vec<f32>> {
        self.pixels(&Self::decode(bytes)?)
    }

    /// Converts to RGB (grayscale replicated, alpha dropped), resizes and
    /// scales. Output is row-major `(height, width, 3)`.
    pub fn pixels(&self, img: &DynamicImage) -> Result<Vec<f32>> {
        if self.channels != 3 {
            return Err(Error::InvalidConfig(format!("{} channels unsupported; images are RGB", self.channels)));
        }
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Decode("zero-dimension image".into()));
        }
        let rgb = img.to_rgb8();
        Ok(match self.resize_mode {
            ResizeMode::BilinearStretch => {
                bilinear_resize(&rgb, self.target_height, self.target_width, |v| self.value_range.scale(v))
            }
        })
    }

    /// Preprocessed image as a `(height, width, 3)` tensor.
    pub fn tensor(&self, img: &DynamicImage) -> Result<Tensor> {
        let px = self.pixels(img)?;
        Ok(Tensor::from_vec(px, (self.target_height, self.target_width, self.channels), &Device::Cpu)?)
    }
}

/// Preprocesses encoded image bytes with the default configuration into a
/// `(299, 299, 3)` tensor with values in [-1, 1].
pub fn preprocess(image_bytes: &[u8]) -> Result<Tensor> {
    let cfg = PreprocessConfig::default();
    cfg.tensor(&PreprocessConfig::decode(image_bytes)?)
}

/// Half-pixel-centre bilinear interpolation on 8-bit RGB, applying `scale`
/// to each interpolated value.
fn bilinear_resize(src: &RgbImage, out_h: usize, out_w: usize, scale: impl Fn(f32) -> f32) -> Vec<f32> {
    let (in_w, in_h) = (src.width() as usize, src.height() as usize);
    let raw = src.as_raw();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    let px = |y: usize, x: usize, c: usize| raw[(y * in_w + x) * 3 + c] as f32;
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = px(y0, x0, c) + (px(y0, x1, c) - px(y0, x0, c)) * fx;
                let bottom = px(y1, x0, c) + (px(y1, x1, c) - px(y1, x0, c)) * fx;
                out.push(scale(top + (bottom - top) * fy));
            }
        }
    }
    out
}

/// Class probabilities for one image, in canonical label order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionScores([f32; NUM_CLASSES]);

impl PredictionScores {
    pub fn new(probs: [f32; NUM_CLASSES]) -> Self {
        PredictionScores(probs)
    }

    pub fn from_slice(probs: &[f32]) -> Result<Self> {
        let arr: [f32; NUM_CLASSES] = probs
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("expected {NUM_CLASSES} scores, got {}", probs.len())))?;
        Ok(PredictionScores(arr))
    }

    pub fn get(&self, label: ClassLabel) -> f32 {
        self.0[label.index()]
    }

    pub fn as_array(&self) -> [f32; NUM_CLASSES] {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassLabel, f32)> + '_ {
        ClassLabel::ALL.into_iter().zip(self.0.iter().copied())
    }

    pub fn top_label(&self) -> ClassLabel {
        top_label(self)
    }

    /// JSON object with the six label keys in canonical order, each value a
    /// number with four fractional digits.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{");
        for (i, (label, p)) in self.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "\"{label}\":{:.4}", p.clamp(0.0, 1.0));
        }
        s.push('}');
        s
    }
}

impl Serialize for PredictionScores {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(NUM_CLASSES))?;
        for (label, p) in self.iter() {
            map.serialize_entry(label.name(), &p)?;
        }
        map.end()
    }
}

/// Highest-scoring label; ties go to the label earliest in canonical order.
pub fn top_label(scores: &PredictionScores) -> ClassLabel {
    let mut best = 0;
    for (i, &p) in scores.0.iter().enumerate().skip(1) {
        if p > scores.0[best] {
            best = i;
        }
    }
    ClassLabel::ALL[best]
}
