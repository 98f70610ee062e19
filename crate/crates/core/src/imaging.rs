//! Pixel-level helpers shared by the dataset loader and the explainers:
//! bilinear resampling, the heatmap colormap, and PNG output.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Bilinear resample of one `h×w` plane to `out_h×out_w`.
///
/// Uses half-pixel-centred coordinates: output pixel `o` samples source
/// position `(o + 0.5)·in/out − 0.5`, clamped to the valid range. Same-size
/// input is returned unchanged.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane length does not match {h}×{w}");
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let ys: Vec<_> = (0..out_h).map(|o| sample_coord(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| sample_coord(o, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn sample_coord(o: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let pos = (o as f64 + 0.5) * input as f64 / output as f64 - 0.5;
    let pos = pos.clamp(0.0, (input - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, pos - i0 as f64)
}

/// Min-max normalization to `[0, 1]`. A constant (or empty) input maps to
/// all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 || !range.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Heatmap stops: blue, cyan, green, yellow, red at 0, ¼, ½, ¾, 1.
pub const COLORMAP_STOPS: [[u8; 3]; 5] = [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]];

/// Piecewise-linear blue→red lookup of a value in `[0, 1]` (clamped),
/// returned as unrounded channel intensities in `[0, 255]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let segments = (COLORMAP_STOPS.len() - 1) as f64;
    let pos = v * segments;
    let i = (pos.floor() as usize).min(COLORMAP_STOPS.len() - 2);
    let t = pos - i as f64;
    let (a, b) = (COLORMAP_STOPS[i], COLORMAP_STOPS[i + 1]);
    std::array::from_fn(|k| a[k] as f64 * (1.0 - t) + b[k] as f64 * t)
}

pub fn colormap_rgb(v: f64) -> [u8; 3] {
    colormap(v).map(to_u8)
}

pub fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Writes an 8-bit RGB or grayscale PNG with optional `tEXt` metadata.
pub fn write_png(path: &Path, width: u32, height: u32, rgb: bool, pixels: &[u8], text: &[(&str, &str)]) -> Result<()> {
    let channels = if rgb { 3 } else { 1 };
    if pixels.len() != width as usize * height as usize * channels {
        return Err(Error::InvalidArgument(format!(
            "{}: pixel buffer of {} bytes does not match {width}×{height}×{channels}",
            path.display(),
            pixels.len()
        )));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(if rgb {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        encoder.add_text_chunk(k.to_string(), v.to_string()).map_err(png_err)?;
    }
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscale_2x2_to_centre() {
        // output centre maps to source (0.5, 0.5): mean of the four pixels
        let out = resize_bilinear(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1, 1);
        assert_eq!(out, vec![2.5]);
        let out = resize_bilinear(&[0.0, 10.0, 20.0, 50.0], 2, 2, 1, 1);
        assert_eq!(out, vec![20.0]);
    }

    #[test]
    fn upscale_2x2_to_4x4_keeps_corners() {
        let src = [1.0, 2.0, 3.0, 4.0];
        let out = resize_bilinear(&src, 2, 2, 4, 4);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[3], 2.0);
        assert_eq!(out[12], 3.0);
        assert_eq!(out[15], 4.0);
        // pixel 1 samples x = 1.5·0.5 − 0.5 = 0.25 on row 0
        assert!((out[1] - 1.25).abs() < 1e-12);
        // pixel (1,1) samples (0.25, 0.25)
        assert!((out[5] - (1.0 + 0.25 * 1.0 + 0.25 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_and_identity() {
        let out = resize_bilinear(&[0.3; 9], 3, 3, 7, 5);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn normalize_degenerate_and_range() {
        assert_eq!(min_max_normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap_rgb(0.0), [0, 0, 255]);
        assert_eq!(colormap_rgb(1.0), [255, 0, 0]);
        assert_eq!(colormap_rgb(0.5), [0, 255, 0]);
        assert_eq!(colormap(0.125), [0.0, 127.5, 255.0]);
    }
}
