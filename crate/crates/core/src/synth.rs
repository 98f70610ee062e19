//! Synthetic shape corpus: four classes of flat shapes on noisy
//! backgrounds, one directory per class.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::write_png;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Cross,
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cross, Shape::Disk, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cross => "cross",
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel centre `(x, y)` lies in the shape centred on `(cx, cy)`
    /// with half-extent `r`.
    pub fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Cross => {
                let arm = r * 0.3;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            Shape::Triangle => {
                // apex up, base at cy + r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }
}

/// Renders one `size×size` RGB image (row-major, interleaved).
pub fn render<R: Rng>(shape: Shape, size: usize, rng: &mut R) -> Vec<u8> {
    let s = size as f64;
    let r = rng.random_range(0.18 * s..0.32 * s);
    let cx = rng.random_range(r..s - r);
    let cy = rng.random_range(r..s - r);
    let bg: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..90));
    let fg: [u8; 3] = std::array::from_fn(|_| rng.random_range(150..=255));
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let inside = shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r);
            let base = if inside { fg } else { bg };
            for c in base {
                let noise: i16 = rng.random_range(-12..=12);
                px.push((c as i16 + noise).clamp(0, 255) as u8);
            }
        }
    }
    px
}

/// Writes `per_class` PNGs per shape under `root/<shape>/`, returning the
/// paths in write order.
pub fn generate_shapes(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(per_class * Shape::ALL.len());
    for shape in Shape::ALL {
        let dir = root.join(shape.name());
        for i in 0..per_class {
            let px = render(shape, size, &mut rng);
            let path = dir.join(format!("{}_{i:04}.png", shape.name()));
            write_png(&path, size as u32, size as u32, true, &px, &[])?;
            paths.push(path);
        }
    }
    Ok(paths)
}
