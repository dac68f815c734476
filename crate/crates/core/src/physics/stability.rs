use serde::{Deserialize, Serialize};

use super::{PhysicsError, TowerScene};

const AXIS_ALIGNED_TOL: f64 = 1e-9;

/// Support interval and supported centre of mass at one interface.
/// Interface 0 is the ground; interface k >= 1 lies between blocks k-1 and k
/// (zero-based, bottom to top).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterfaceSupport {
    pub interface: usize,
    pub lo: f64,
    pub hi: f64,
    pub com_x: f64,
}

impl InterfaceSupport {
    pub fn margin(&self) -> f64 {
        (self.com_x - self.lo).min(self.hi - self.com_x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub margin: f64,
    pub per_interface: Vec<InterfaceSupport>,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        self.margin > 0.0
    }
}

/// Signed static-stability margin of an axis-aligned stack of equal masses.
///
/// For every interface the centre of mass of all blocks above it must lie
/// inside the horizontal support interval; the margin is the smallest
/// distance from such a centre of mass to its interval edge.
pub fn static_stability(scene: &TowerScene) -> Result<StabilityReport, PhysicsError> {
    let blocks = scene.blocks();
    if let Some((block, b)) = blocks
        .iter()
        .enumerate()
        .find(|(_, b)| b.theta.abs() > AXIS_ALIGNED_TOL)
    {
        return Err(PhysicsError::NonAxisAligned {
            block,
            theta: b.theta,
        });
    }
    let half = scene.params().side / 2.0;
    let n = blocks.len();
    let mut per_interface = Vec::with_capacity(n);
    for k in 0..n {
        let (lo, hi) = if k == 0 {
            (blocks[0].x - half, blocks[0].x + half)
        } else {
            let below = blocks[k - 1].x;
            let above = blocks[k].x;
            ((below - half).max(above - half), (below + half).min(above + half))
        };
        if hi < lo {
            return Err(PhysicsError::NoOverlap {
                interface: k,
                margin: hi - lo,
            });
        }
        let above = &blocks[k..];
        let com_x = above.iter().map(|b| b.x).sum::<f64>() / above.len() as f64;
        per_interface.push(InterfaceSupport {
            interface: k,
            lo,
            hi,
            com_x,
        });
    }
    let margin = per_interface
        .iter()
        .map(InterfaceSupport::margin)
        .fold(f64::INFINITY, f64::min);
    Ok(StabilityReport {
        margin,
        per_interface,
    })
}
