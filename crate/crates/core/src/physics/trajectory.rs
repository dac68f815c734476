use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{BlockPose, PhysicsParams, FELL_DISPLACEMENT_FRACTION, FELL_ROTATION_RAD};

pub const TRAJECTORY_CSV_HEADER: &str = "frame,t,block,x,y,theta,vx,vy,omega";

/// Block poses captured at a fixed rate; `frames[f][i]` is block `i` at
/// time `f / capture_hz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub capture_hz: f64,
    pub duration: f64,
    pub frames: Vec<Vec<BlockPose>>,
}

impl Trajectory {
    pub fn frame_count(duration: f64, capture_hz: f64) -> usize {
        // Tolerate representation error in products like 5.0 * 8.0.
        (duration * capture_hz + 1e-9).floor() as usize + 1
    }

    pub fn n_blocks(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / self.capture_hz
    }

    /// CSV with one row per (frame, block), values to 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * self.frames.len() * self.n_blocks() + 64);
        out.push_str(TRAJECTORY_CSV_HEADER);
        out.push('\n');
        for (f, poses) in self.frames.iter().enumerate() {
            for (i, p) in poses.iter().enumerate() {
                let _ = write!(out, "{f},{},{i}", sig9(self.time_of(f)));
                for v in [p.x, p.y, p.theta, p.vx, p.vy, p.omega] {
                    out.push(',');
                    out.push_str(&sig9(v));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses the CSV written by [`Trajectory::to_csv`].
    pub fn from_csv(text: &str, duration: f64) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(TRAJECTORY_CSV_HEADER) {
            return Err("missing trajectory header".into());
        }
        let mut frames: Vec<Vec<BlockPose>> = Vec::new();
        let mut times = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 9 {
                return Err(format!("line {}: expected 9 columns", ln + 2));
            }
            let frame: usize = cols[0].parse().map_err(|e| format!("line {}: {e}", ln + 2))?;
            let block: usize = cols[2].parse().map_err(|e| format!("line {}: {e}", ln + 2))?;
            let mut vals = [0.0f64; 7];
            for (v, s) in vals.iter_mut().zip(std::iter::once(cols[1]).chain(cols[3..].iter().copied())) {
                *v = s.parse().map_err(|e| format!("line {}: {e}", ln + 2))?;
            }
            if frame == frames.len() {
                frames.push(Vec::new());
                times.push(vals[0]);
            }
            if frame + 1 != frames.len() || block != frames[frame].len() {
                return Err(format!("line {}: rows out of order", ln + 2));
            }
            frames[frame].push(BlockPose {
                x: vals[1],
                y: vals[2],
                theta: vals[3],
                vx: vals[4],
                vy: vals[5],
                omega: vals[6],
            });
        }
        if frames.is_empty() {
            return Err("trajectory has no frames".into());
        }
        let capture_hz = if times.len() > 1 { 1.0 / times[1] } else { super::DEFAULT_CAPTURE_HZ };
        Ok(Self {
            capture_hz,
            duration,
            frames,
        })
    }
}

/// Formats like C's `%.9g`.
pub(crate) fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Whether any block moved more than a quarter side or turned more than 10
/// degrees between the first and last frame.
pub fn fell_label(traj: &Trajectory, params: &PhysicsParams) -> bool {
    let (Some(first), Some(last)) = (traj.frames.first(), traj.frames.last()) else {
        return false;
    };
    let limit = FELL_DISPLACEMENT_FRACTION * params.side;
    first.iter().zip(last).any(|(a, b)| {
        (b.x - a.x).abs() > limit
            || (b.y - a.y).abs() > limit
            || (b.theta - a.theta).abs() > FELL_ROTATION_RAD
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_with_final(offsets: &[(f64, f64, f64)]) -> Trajectory {
        let first: Vec<BlockPose> = (0..offsets.len())
            .map(|i| BlockPose::at_rest(0.0, 0.5 + i as f64, 0.0))
            .collect();
        let last = first
            .iter()
            .zip(offsets)
            .map(|(p, &(dx, dy, dth))| BlockPose::at_rest(p.x + dx, p.y + dy, p.theta + dth))
            .collect();
        Trajectory {
            capture_hz: 8.0,
            duration: 5.0,
            frames: vec![first, last],
        }
    }

    #[test]
    fn still_trajectory_did_not_fall() {
        let t = traj_with_final(&[(0.0, 0.0, 0.0); 3]);
        assert!(!fell_label(&t, &PhysicsParams::default()));
    }

    #[test]
    fn top_block_on_ground_fell() {
        let t = traj_with_final(&[(0.0, 0.0, 0.0), (1.0, -1.0, 0.0)]);
        assert!(fell_label(&t, &PhysicsParams::default()));
    }

    #[test]
    fn small_offsets_below_thresholds() {
        let five_deg = 5f64.to_radians();
        let t = traj_with_final(&[(0.1, 0.0, five_deg); 4]);
        assert!(!fell_label(&t, &PhysicsParams::default()));
        let t = traj_with_final(&[(0.0, 0.0, 11f64.to_radians()), (0.0, 0.0, 0.0)]);
        assert!(fell_label(&t, &PhysicsParams::default()));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(0.5), "0.5");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(-2.0), "-2");
        assert_eq!(sig9(123456789.0), "123456789");
        assert_eq!(sig9(1234567891.0), "1.23456789e+09");
        assert_eq!(sig9(1.5e-7), "1.5e-07");
        assert_eq!(sig9(0.000123456789), "0.000123456789");
    }

    #[test]
    fn csv_round_trip_is_stable() {
        let t = traj_with_final(&[(0.1234567891, -0.2, 0.3), (1e-9, 2.0, -0.7)]);
        let csv = t.to_csv();
        assert!(csv.starts_with("frame,t,block,x,y,theta,vx,vy,omega\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
        let back = Trajectory::from_csv(&csv, 5.0).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.capture_hz, 8.0);
    }
}
