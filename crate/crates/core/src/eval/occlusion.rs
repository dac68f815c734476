use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::learn::Model;
use crate::pnm;

pub const GRID: usize = 14;
/// Patch standard deviation as a fraction of image width.
pub const SIGMA_FRACTION: f64 = 0.2;
pub const MID_GRAY: f64 = 128.0 / 255.0;

/// Change in fall probability per occluder position, row-major with rows
/// along y: `cells[j * GRID + i]` has its patch centred at
/// `((i + 0.5) W / 14, (j + 0.5) H / 14)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub base_prob: f64,
    pub cells: Vec<f64>,
}

/// How heatmap values map to 8-bit gray: `gray = round((v - offset) * scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmMapping {
    pub grid: usize,
    pub min: f64,
    pub max: f64,
    pub offset: f64,
    pub scale: f64,
}

impl Heatmap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cells[j * GRID + i]
    }

    /// 14×14 PGM with values stretched over 0..255, plus the mapping used.
    pub fn to_pgm(&self) -> (Vec<u8>, PgmMapping) {
        let min = self.cells.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
        let gray: Vec<u8> = self
            .cells
            .iter()
            .map(|&v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        let mapping = PgmMapping {
            grid: GRID,
            min,
            max,
            offset: min,
            scale,
        };
        (pnm::encode_gray_pgm(GRID, GRID, &gray), mapping)
    }
}

/// Patch centre in pixel coordinates for cell (i, j).
pub fn cell_center(i: usize, j: usize, width: usize, height: usize) -> (f64, f64) {
    (
        (i as f64 + 0.5) * width as f64 / GRID as f64,
        (j as f64 + 0.5) * height as f64 / GRID as f64,
    )
}

/// Blends a Gaussian mid-gray patch into a `(3, H, W)` image in [0, 1].
/// Pixel (x, y) is taken at its centre `(x + 0.5, y + 0.5)`.
pub fn occlude(image: &[f32], width: usize, height: usize, cx: f64, cy: f64) -> Vec<f32> {
    let sigma = SIGMA_FRACTION * width as f64;
    let denom = 2.0 * sigma * sigma;
    let plane = width * height;
    let mut out = image.to_vec();
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let a = (-(dx * dx + dy * dy) / denom).exp();
            for c in 0..3 {
                let v = &mut out[c * plane + y * width + x];
                *v = (*v as f64 + a * (MID_GRAY - *v as f64)) as f32;
            }
        }
    }
    out
}

/// Fall-probability change for a single occluder at cell (i, j).
pub fn single_occlusion_delta(model: &dyn Model<f32>, image: &[f32], i: usize, j: usize) -> f64 {
    let s = model.image_size();
    let (cx, cy) = cell_center(i, j, s, s);
    let occluded = occlude(image, s, s, cx, cy);
    model.fall_prob(&occluded) as f64 - model.fall_prob(image) as f64
}

pub fn occlusion_heatmap(model: &dyn Model<f32>, image: &[f32]) -> Heatmap {
    let base = model.fall_prob(image) as f64;
    let s = model.image_size();
    let cells = (0..GRID * GRID)
        .into_par_iter()
        .map(|k| {
            let (cx, cy) = cell_center(k % GRID, k / GRID, s, s);
            model.fall_prob(&occlude(image, s, s, cx, cy)) as f64 - base
        })
        .collect();
    Heatmap { base_prob: base, cells }
}

/// Which cells have their centre inside the bounding box of non-background
/// mask pixels (pixel extents, inclusive of the outer edges).
pub fn cells_inside_mask_bbox(mask: &[u8], width: usize, height: usize) -> Vec<bool> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (0..GRID * GRID)
        .map(|k| {
            let (cx, cy) = cell_center(k % GRID, k / GRID, width, height);
            x0 != usize::MAX && cx >= x0 as f64 && cx <= x1 as f64 && cy >= y0 as f64 && cy <= y1 as f64
        })
        .collect()
}
