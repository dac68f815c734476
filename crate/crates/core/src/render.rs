//! Orthographic point-sampled rasterizer for block towers.
//!
//! Each pixel centre is tested against the oriented block squares from the
//! top of the stack downwards; the first hit decides both the RGB colour and
//! the class id written to the mask. There is no anti-aliasing, so masks
//! hold exact class ids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{BlockClass, BlockPose, Trajectory};
use crate::scenegen::RenderParams;

/// Class colours for ids 1..=4.
pub const PALETTE: [[u8; 3]; 4] = [[220, 40, 40], [40, 180, 60], [45, 90, 220], [230, 210, 40]];

pub const GROUND_COLOR: [u8; 3] = [30, 30, 30];
pub const GROUND_BAND_PX: usize = 2;
pub const NUM_CLASSES: usize = 5;

/// Capture times for mask targets, in seconds.
pub const MASK_TIMES: [f64; 4] = [0.0, 1.0, 2.0, 4.0];

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("time {time} s outside trajectory [0, {duration}] s")]
    TimeOutOfRange { time: f64, duration: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major floats in [0, 1], shape (3, height, width).
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0f32; 3 * n];
        for (p, rgb) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = rgb[c] as f32 / 255.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    /// Row-major class ids, 0 = background.
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Square world window mapped onto the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub center_x: f64,
    pub center_y: f64,
    pub window_height: f64,
    pub width_px: usize,
    pub height_px: usize,
}

impl Camera {
    /// Window of height `(n_blocks + 1.5) * side * scale`, shifted
    /// horizontally, with the ground band on the bottom two pixel rows.
    pub fn for_tower(n_blocks: usize, side: f64, render: &RenderParams, size_px: usize) -> Self {
        let window_height = (n_blocks as f64 + 1.5) * side * render.camera_scale;
        let pixel = window_height / size_px as f64;
        Self {
            center_x: render.camera_shift,
            center_y: window_height / 2.0 - GROUND_BAND_PX as f64 * pixel,
            window_height,
            width_px: size_px,
            height_px: size_px,
        }
    }

    pub fn pixel_size(&self) -> f64 {
        self.window_height / self.height_px as f64
    }

    /// World coordinates of the centre of pixel (px, py); py counts down.
    pub fn pixel_center(&self, px: usize, py: usize) -> (f64, f64) {
        let s = self.pixel_size();
        let x = self.center_x + (px as f64 + 0.5 - self.width_px as f64 / 2.0) * s;
        let y = self.center_y + (self.height_px as f64 / 2.0 - (py as f64 + 0.5)) * s;
        (x, y)
    }

    /// Continuous image coordinates (x right, y down) of a world point.
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.pixel_size();
        (
            (x - self.center_x) / s + self.width_px as f64 / 2.0,
            self.height_px as f64 / 2.0 - (y - self.center_y) / s,
        )
    }
}

struct Square {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    half: f64,
}

impl Square {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (dx * self.cos + dy * self.sin).abs() <= self.half
            && (-dx * self.sin + dy * self.cos).abs() <= self.half
    }
}

/// Draws the blocks (bottom to top, with their classes) into an image and
/// a class mask.
pub fn rasterize(
    poses: &[BlockPose],
    classes: &[BlockClass],
    side: f64,
    cam: &Camera,
    style: &RenderParams,
) -> (Image, MaskImage) {
    assert_eq!(poses.len(), classes.len(), "one class per block");
    let squares: Vec<Square> = poses
        .iter()
        .map(|p| Square {
            cx: p.x,
            cy: p.y,
            cos: p.theta.cos(),
            sin: p.theta.sin(),
            half: side / 2.0,
        })
        .collect();
    let colors: Vec<[u8; 3]> = classes
        .iter()
        .map(|c| {
            let base = PALETTE[c.id() as usize - 1];
            base.map(|v| (v as f64 * style.brightness).round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    let bg = (style.background * 255.0).round().clamp(0.0, 255.0) as u8;
    let ground_depth = GROUND_BAND_PX as f64 * cam.pixel_size();

    let (w, h) = (cam.width_px, cam.height_px);
    let mut image = Image::filled(w, h, [bg; 3]);
    let mut mask = MaskImage {
        width: w,
        height: h,
        data: vec![0; w * h],
    };
    for py in 0..h {
        for px in 0..w {
            let (x, y) = cam.pixel_center(px, py);
            let hit = squares.iter().rposition(|s| s.contains(x, y));
            let i = py * w + px;
            if let Some(k) = hit {
                mask.data[i] = classes[k].id();
                image.data[i * 3..i * 3 + 3].copy_from_slice(&colors[k]);
            } else if y < 0.0 && y >= -ground_depth {
                image.data[i * 3..i * 3 + 3].copy_from_slice(&GROUND_COLOR);
            }
        }
    }
    (image, mask)
}

/// Renders the captured frames nearest to each requested time.
pub fn render_sequence(
    traj: &Trajectory,
    classes: &[BlockClass],
    side: f64,
    cam: &Camera,
    style: &RenderParams,
    times: &[f64],
) -> Result<Vec<(Image, MaskImage)>, RenderError> {
    let last = traj.frames.len().saturating_sub(1);
    times
        .iter()
        .map(|&t| {
            if !(t >= 0.0 && t <= traj.duration + 1e-9) {
                return Err(RenderError::TimeOutOfRange {
                    time: t,
                    duration: traj.duration,
                });
            }
            let frame = ((t * traj.capture_hz).round() as usize).min(last);
            Ok(rasterize(&traj.frames[frame], classes, side, cam, style))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{simulate, PhysicsParams, TowerScene};

    fn style() -> RenderParams {
        RenderParams {
            background: 0.5,
            brightness: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scene_is_background_and_ground() {
        let cam = Camera::for_tower(2, 1.0, &RenderParams::default(), 56);
        let (img, mask) = rasterize(&[], &[], 1.0, &cam, &style());
        assert!(mask.data.iter().all(|&v| v == 0));
        for py in 0..56 {
            for px in 0..56 {
                let expect = if py >= 56 - GROUND_BAND_PX { GROUND_COLOR } else { [128; 3] };
                assert_eq!(img.pixel(px, py), expect, "({px},{py})");
            }
        }
    }

    #[test]
    fn square_area_matches_analytic_count() {
        let cam = Camera {
            center_x: 0.0,
            center_y: 0.0,
            window_height: 4.0,
            width_px: 56,
            height_px: 56,
        };
        let pose = BlockPose::at_rest(0.1, 0.05, 0.3);
        let (_, mask) = rasterize(&[pose], &[BlockClass::Blue], 1.5, &cam, &style());
        let s = cam.pixel_size();
        let area_px = (1.5 / s).powi(2);
        let perimeter_px = 4.0 * 1.5 / s;
        let count = mask.class_counts()[3] as f64;
        assert!((count - area_px).abs() <= 2.0 * perimeter_px, "{count} vs {area_px}");
        // Tighter check by brute force over a fine subgrid of each pixel.
        let mut fine = 0.0;
        let sub = 8;
        for py in 0..56 {
            for px in 0..56 {
                for j in 0..sub {
                    for i in 0..sub {
                        let x = cam.center_x + (px as f64 + (i as f64 + 0.5) / sub as f64 - 28.0) * s;
                        let y = cam.center_y + (28.0 - py as f64 - (j as f64 + 0.5) / sub as f64) * s;
                        let (dx, dy) = (x - 0.1, y - 0.05);
                        let (c, sn) = (0.3f64.cos(), 0.3f64.sin());
                        if (dx * c + dy * sn).abs() <= 0.75 && (-dx * sn + dy * c).abs() <= 0.75 {
                            fine += 1.0 / (sub * sub) as f64;
                        }
                    }
                }
            }
        }
        assert!((count - fine).abs() <= perimeter_px / 2.0, "{count} vs {fine}");
    }

    #[test]
    fn higher_block_wins_overlap_and_mask_matches_colour() {
        let cam = Camera::for_tower(2, 1.0, &RenderParams::default(), 56);
        let poses = [BlockPose::at_rest(0.0, 0.5, 0.0), BlockPose::at_rest(0.0, 0.9, 0.0)];
        let classes = [BlockClass::Red, BlockClass::Yellow];
        let (img, mask) = rasterize(&poses, &classes, 1.0, &cam, &style());
        let (px, py) = cam.project(0.0, 1.2);
        assert_eq!(mask.get(px as usize, py as usize), 4);
        for (i, &c) in mask.data.iter().enumerate() {
            let rgb = [img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]];
            if c > 0 {
                assert_eq!(rgb, PALETTE[c as usize - 1]);
            } else {
                assert!(!PALETTE.contains(&rgb));
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cam = Camera::for_tower(3, 1.0, &RenderParams::default(), 56);
        let poses = [
            BlockPose::at_rest(0.0, 0.5, 0.0),
            BlockPose::at_rest(0.2, 1.5, 0.1),
            BlockPose::at_rest(-0.1, 2.5, -0.2),
        ];
        let classes = [BlockClass::Green, BlockClass::Blue, BlockClass::Red];
        let a = rasterize(&poses, &classes, 1.0, &cam, &style());
        let b = rasterize(&poses, &classes, 1.0, &cam, &style());
        assert_eq!(a, b);
    }

    #[test]
    fn resolution_stable_under_downsampling() {
        let render = RenderParams::default();
        let scene = TowerScene::aligned(&[0.0, 0.3, 0.75], PhysicsParams::default()).unwrap();
        let traj = simulate(&scene).unwrap();
        let poses = &traj.frames[6];
        let classes = scene.class_ids();
        let lo_cam = Camera::for_tower(3, 1.0, &render, 56);
        let hi_cam = Camera::for_tower(3, 1.0, &render, 112);
        let (_, lo) = rasterize(poses, classes, 1.0, &lo_cam, &style());
        let (_, hi) = rasterize(poses, classes, 1.0, &hi_cam, &style());
        let mut down = vec![0u8; 56 * 56];
        for y in 0..56 {
            for x in 0..56 {
                let mut votes = [0usize; NUM_CLASSES];
                let subs = [(0, 0), (1, 0), (0, 1), (1, 1)].map(|(dx, dy)| hi.get(2 * x + dx, 2 * y + dy));
                for &c in &subs {
                    votes[c as usize] += 1;
                }
                // Majority; a 2-2 tie goes to the top-left sample so that
                // opposite edges of a shape break ties in opposite directions.
                let top = *votes.iter().max().unwrap();
                let best = if votes[subs[0] as usize] == top { subs[0] } else { subs[3] };
                down[y * 56 + x] = best;
            }
        }
        let down = MaskImage { width: 56, height: 56, data: down };
        let (a, b) = (lo.class_counts(), down.class_counts());
        for c in 1..NUM_CLASSES {
            if a[c] + b[c] == 0 {
                continue;
            }
            let rel = (a[c] as f64 - b[c] as f64).abs() / a[c] as f64;
            assert!(rel < 0.05, "class {c}: {} vs {}", a[c], b[c]);
        }
    }

    #[test]
    fn sequence_of_stable_tower_is_constant() {
        let scene = TowerScene::aligned(&[0.0, 0.1, 0.0], PhysicsParams::default()).unwrap();
        let traj = simulate(&scene).unwrap();
        let cam = Camera::for_tower(3, 1.0, &RenderParams::default(), 56);
        let frames =
            render_sequence(&traj, scene.class_ids(), 1.0, &cam, &style(), &MASK_TIMES).unwrap();
        assert_eq!(frames.len(), 4);
        for f in &frames[1..] {
            assert_eq!(f.1, frames[0].1);
        }
        let direct = rasterize(scene.blocks(), scene.class_ids(), 1.0, &cam, &style());
        assert_eq!(frames[0], direct);
        let err = render_sequence(&traj, scene.class_ids(), 1.0, &cam, &style(), &[6.0]);
        assert!(matches!(err, Err(RenderError::TimeOutOfRange { .. })));
    }

    #[test]
    fn falling_block_lands_low_in_image() {
        let scene = TowerScene::aligned(&[0.0, 0.6], PhysicsParams::default()).unwrap();
        let traj = simulate(&scene).unwrap();
        let cam = Camera::for_tower(2, 1.0, &RenderParams::default(), 56);
        let classes = scene.class_ids();
        let top = classes[1].id();
        let frames = render_sequence(&traj, classes, 1.0, &cam, &style(), &[0.0, 4.0]).unwrap();
        let centroid = |m: &MaskImage| {
            let (mut sy, mut n) = (0.0, 0.0);
            for (i, &v) in m.data.iter().enumerate() {
                if v == top {
                    sy += (i / m.width) as f64;
                    n += 1.0;
                }
            }
            sy / n
        };
        let drop = centroid(&frames[1].1) - centroid(&frames[0].1);
        let block_px = 1.0 / cam.pixel_size();
        assert!(drop >= block_px - 1.0, "drop {drop} px, block {block_px} px");
        let overlap = frames[0]
            .1
            .data
            .iter()
            .zip(&frames[1].1.data)
            .filter(|(a, b)| **a == top && **b == top)
            .count();
        assert_eq!(overlap, 0);
    }
}
