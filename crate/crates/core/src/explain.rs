//! Class activation maps and feature-map grids.
//!
//! Both CAM variants differentiate the pre-softmax logit `s_c` with respect
//! to the activation `A` of a conv layer:
//!
//! * HiResCAM: `raw[h][w] = Σ_f ∂s_c/∂A[f][h][w] · A[f][h][w]`
//! * Grad-CAM: `raw[h][w] = Σ_f α_f · A[f][h][w]`, `α_f = mean_{h,w} ∂s_c/∂A[f]`
//!
//! The raw map stays signed. The display map is the raw map clamped at zero
//! and min-max normalized; a constant map normalizes to zeros.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::imaging::{colormap, min_max_normalize, resize_bilinear, to_u8, write_png};
use crate::model::{ActivationRecord, Model};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamMethod {
    HiResCam,
    GradCam,
}

impl CamMethod {
    pub const NAMES: [&'static str; 2] = ["hirescam", "gradcam"];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::HiResCam => "hirescam",
            CamMethod::GradCam => "gradcam",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hirescam" => Ok(CamMethod::HiResCam),
            "gradcam" => Ok(CamMethod::GradCam),
            _ => Err(Error::InvalidArgument(format!(
                "unknown CAM method `{s}`; valid methods: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub method: CamMethod,
    pub layer: String,
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// Signed attribution, row-major `height×width`.
    pub raw: Vec<f64>,
    /// Rectified and min-max normalized `raw`, in `[0, 1]`.
    pub display: Vec<f64>,
    /// `display` resampled to the input resolution, once requested.
    pub upsampled: Option<UpsampledMap>,
    /// Pre-softmax score of `class`.
    pub logit: f64,
    /// Head bias of `class`.
    pub bias: f64,
    /// Softmax probability of `class`.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpsampledMap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl CamMap {
    pub fn raw_sum(&self) -> f64 {
        self.raw.iter().sum()
    }
}

/// Result of one attribution pass, before the CAM reduction.
#[derive(Clone, Debug)]
pub struct Attribution<T: Scalar> {
    pub record: ActivationRecord<T>,
    pub logits: Tensor<T>,
    pub class: usize,
}

/// Forward with capture of `layer`, then backward from logit `class`.
/// `input` is a `1×C×S×S` batch. The returned record holds `∂s_c/∂A`.
pub fn attribute<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize, layer: &str) -> Result<Attribution<T>> {
    let classes = model.num_classes();
    if class >= classes {
        return Err(Error::LabelOutOfRange { label: class, classes });
    }
    if input.shape().first() != Some(&1) {
        return Err(Error::shape(
            "explain",
            format!("expected a single-image batch, got {:?}", input.shape()),
        ));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    // Only the captured activation needs a gradient; seeding the input keeps
    // every downstream node tracked.
    let x = tape.variable(input.clone());
    let pass = model.forward(&mut tape, x, &params, &[layer])?;
    let score = tape.select(pass.logits, class)?;
    tape.backward(score)?;
    let (_, act_id) = &pass.captured[0];
    let activation = tape.value(*act_id)?.clone();
    let grad = tape
        .grad(*act_id)?
        .ok_or_else(|| Error::Backward("no gradient reached the captured layer".into()))?
        .to_vec();
    let gradient = Tensor::new(activation.shape().to_vec(), grad)?;
    Ok(Attribution {
        record: ActivationRecord {
            layer: layer.to_string(),
            activation,
            gradient: Some(gradient),
        },
        logits: tape.value(pass.logits)?.clone(),
        class,
    })
}

pub fn hirescam<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize, layer: &str) -> Result<CamMap> {
    explain(model, input, class, layer, CamMethod::HiResCam)
}

pub fn gradcam<T: Scalar>(model: &Model<T>, input: &Tensor<T>, class: usize, layer: &str) -> Result<CamMap> {
    explain(model, input, class, layer, CamMethod::GradCam)
}

pub fn explain<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    class: usize,
    layer: &str,
    method: CamMethod,
) -> Result<CamMap> {
    let att = attribute(model, input, class, layer)?;
    let shape = att.record.activation.shape();
    let (f, h, w) = (shape[1], shape[2], shape[3]);
    let a = att.record.activation.data();
    let g = att.record.gradient.as_ref().expect("attribute fills gradient").data();
    let raw = match method {
        CamMethod::HiResCam => hirescam_raw(f, h * w, a, g),
        CamMethod::GradCam => gradcam_raw(f, h * w, a, g),
    };
    let logits: Vec<f64> = att.logits.data().iter().map(|v| v.as_f64()).collect();
    let probability = softmax_at(&logits, class);
    Ok(CamMap {
        method,
        layer: layer.to_string(),
        class,
        height: h,
        width: w,
        display: display_map(&raw),
        raw,
        upsampled: None,
        logit: logits[class],
        bias: model.head_bias().data()[class].as_f64(),
        probability,
    })
}

/// Elementwise gradient × activation, summed over channels.
pub fn hirescam_raw<T: Scalar>(channels: usize, hw: usize, activation: &[T], gradient: &[T]) -> Vec<f64> {
    let mut raw = vec![0.0; hw];
    for c in 0..channels {
        let a = &activation[c * hw..(c + 1) * hw];
        let g = &gradient[c * hw..(c + 1) * hw];
        for ((r, &av), &gv) in raw.iter_mut().zip(a).zip(g) {
            *r += gv.as_f64() * av.as_f64();
        }
    }
    raw
}

/// Channel weights from spatially averaged gradients.
pub fn gradcam_raw<T: Scalar>(channels: usize, hw: usize, activation: &[T], gradient: &[T]) -> Vec<f64> {
    let mut raw = vec![0.0; hw];
    for c in 0..channels {
        let g = &gradient[c * hw..(c + 1) * hw];
        let alpha = g.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        let a = &activation[c * hw..(c + 1) * hw];
        for (r, &av) in raw.iter_mut().zip(a) {
            *r += alpha * av.as_f64();
        }
    }
    raw
}

/// Clamp negatives to zero, then min-max normalize.
pub fn display_map(raw: &[f64]) -> Vec<f64> {
    let rectified: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    min_max_normalize(&rectified)
}

fn softmax_at(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    (logits[class] - max).exp() / denom
}

/// Bilinear upsample of the display map to `size×size`.
pub fn upsample_cam(mut cam: CamMap, size: usize) -> CamMap {
    let values = resize_bilinear(&cam.display, cam.height, cam.width, size, size)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    cam.upsampled = Some(UpsampledMap { size, values });
    cam
}

/// Blends the colorized upsampled map over `original`:
/// `(1 − alpha)·original + alpha·colormap(display)`, rounded per channel.
pub fn overlay(cam: &CamMap, original: &RgbImage, alpha: f64) -> Result<RgbImage> {
    let up = cam
        .upsampled
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("overlay needs an upsampled CAM".into()))?;
    if original.width() as usize != up.size || original.height() as usize != up.size {
        return Err(Error::shape(
            "overlay",
            format!(
                "image {}×{} vs map {}×{}",
                original.width(),
                original.height(),
                up.size,
                up.size
            ),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = original.clone();
    for (px, &v) in out.pixels_mut().zip(&up.values) {
        let color = colormap(v);
        for (channel, c) in px.0.iter_mut().zip(color) {
            *channel = to_u8((1.0 - alpha) * *channel as f64 + alpha * c);
        }
    }
    Ok(out)
}

/// Colorized upsampled map as an RGB image.
pub fn cam_image(cam: &CamMap) -> Result<RgbImage> {
    let up = cam
        .upsampled
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("cam image needs an upsampled CAM".into()))?;
    let pixels = up.values.iter().flat_map(|&v| colormap(v).map(to_u8)).collect();
    Ok(RgbImage::from_raw(up.size as u32, up.size as u32, pixels).expect("size×size×3 buffer"))
}

pub fn write_raw_csv(cam: &CamMap, path: &Path) -> Result<()> {
    let mut text = String::new();
    for row in cam.raw.chunks(cam.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_rgb_png(img: &RgbImage, path: &Path, text: &[(&str, &str)]) -> Result<()> {
    write_png(path, img.width(), img.height(), true, img.as_raw(), text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub layer: String,
    pub tile_height: usize,
    pub tile_width: usize,
    pub rows: usize,
    pub cols: usize,
    /// One independently min-max normalized tile per channel.
    pub tiles: Vec<Vec<f64>>,
}

/// Grid layout for `channels` tiles: `cols = ⌈√F⌉`, `rows = ⌈F / cols⌉`.
pub fn grid_layout(channels: usize) -> (usize, usize) {
    let mut cols = (channels as f64).sqrt().floor() as usize;
    while cols * cols < channels {
        cols += 1;
    }
    let cols = cols.max(1);
    (channels.div_ceil(cols), cols)
}

pub fn feature_grid<T: Scalar>(model: &Model<T>, input: &Tensor<T>, layer: &str) -> Result<FeatureGrid> {
    let pred = model.predict(input, &[layer])?;
    let act = &pred.records[0].activation;
    let shape = act.shape();
    let (f, h, w) = (shape[1], shape[2], shape[3]);
    let hw = h * w;
    let tiles = (0..f)
        .map(|c| {
            let plane: Vec<f64> = act.data()[c * hw..(c + 1) * hw].iter().map(|v| v.as_f64()).collect();
            min_max_normalize(&plane)
        })
        .collect();
    let (rows, cols) = grid_layout(f);
    Ok(FeatureGrid {
        layer: layer.to_string(),
        tile_height: h,
        tile_width: w,
        rows,
        cols,
        tiles,
    })
}

impl FeatureGrid {
    pub const GAP: usize = 1;

    /// Pixel dimensions `(width, height)` of the rendered grid.
    pub fn image_size(&self) -> (usize, usize) {
        (
            self.cols * self.tile_width + (self.cols + 1) * Self::GAP,
            self.rows * self.tile_height + (self.rows + 1) * Self::GAP,
        )
    }

    /// Grayscale rendering; tile `f` sits at row `f / cols`, column `f % cols`,
    /// separated by 1-pixel black gutters.
    pub fn render(&self) -> (usize, usize, Vec<u8>) {
        let (width, height) = self.image_size();
        let mut pixels = vec![0u8; width * height];
        for (f, tile) in self.tiles.iter().enumerate() {
            let oy = Self::GAP + (f / self.cols) * (self.tile_height + Self::GAP);
            let ox = Self::GAP + (f % self.cols) * (self.tile_width + Self::GAP);
            for y in 0..self.tile_height {
                for x in 0..self.tile_width {
                    pixels[(oy + y) * width + ox + x] = to_u8(tile[y * self.tile_width + x] * 255.0);
                }
            }
        }
        (width, height, pixels)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (w, h, pixels) = self.render();
        write_png(path, w as u32, h as u32, false, &pixels, &[("layer", &self.layer)])
    }
}
