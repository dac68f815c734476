//! Planar rigid-body simulation of stacked square blocks.
//!
//! Blocks are unit-density squares resting on a ground half-plane at `y = 0`
//! (y points up). Contacts are resolved with sequential impulses, Coulomb
//! friction and Baumgarte position feedback. The engine is deterministic:
//! the same scene always produces a bit-identical [`Trajectory`].
//!
//! [`static_stability`] is an independent analytic check for axis-aligned
//! stacks, used to validate the simulated outcome labels.

mod collide;
mod stability;
mod trajectory;
pub mod vec2;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stability::{static_stability, InterfaceSupport, StabilityReport};
pub use trajectory::{fell_label, Trajectory, TRAJECTORY_CSV_HEADER};
pub use world::{simulate, simulate_with_rate, total_energy};

/// Frames per second of captured trajectories.
pub const DEFAULT_CAPTURE_HZ: f64 = 8.0;

/// Displacement beyond which a block counts as fallen, as a fraction of side.
pub const FELL_DISPLACEMENT_FRACTION: f64 = 0.25;

/// Rotation beyond which a block counts as fallen (10 degrees).
pub const FELL_ROTATION_RAD: f64 = 0.174_532_925_199_432_95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid physics parameters: {0}")]
    InvalidParams(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("stability oracle requires axis-aligned blocks (block {block} has theta {theta})")]
    NonAxisAligned { block: usize, theta: f64 },
    #[error("interface {interface} has no support overlap (margin {margin})")]
    NoOverlap { interface: usize, margin: f64 },
    #[error("simulation diverged at step {step}")]
    DivergedSimulation { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsParams {
    pub gravity: f64,
    pub side: f64,
    pub mass: f64,
    pub friction_mu: f64,
    pub restitution: f64,
    pub dt: f64,
    pub solver_iters: u32,
    pub baumgarte_beta: f64,
    pub slop: f64,
    pub sim_duration: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            side: 1.0,
            mass: 1.0,
            friction_mu: 0.6,
            restitution: 0.0,
            dt: 1.0 / 240.0,
            solver_iters: 16,
            baumgarte_beta: 0.2,
            slop: 0.005,
            sim_duration: 5.0,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |m: &str| Err(PhysicsError::InvalidParams(m.to_string()));
        let all_finite = [
            self.gravity,
            self.side,
            self.mass,
            self.friction_mu,
            self.restitution,
            self.dt,
            self.baumgarte_beta,
            self.slop,
            self.sim_duration,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return bad("all parameters must be finite");
        }
        if self.gravity <= 0.0 {
            return bad("gravity must be > 0");
        }
        if self.side <= 0.0 {
            return bad("side must be > 0");
        }
        if self.mass <= 0.0 {
            return bad("mass must be > 0");
        }
        if self.dt <= 0.0 {
            return bad("dt must be > 0");
        }
        if self.solver_iters < 1 {
            return bad("solver_iters must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return bad("restitution must be in [0, 1]");
        }
        if self.friction_mu < 0.0 {
            return bad("friction_mu must be >= 0");
        }
        if self.slop < 0.0 || self.baumgarte_beta < 0.0 || self.sim_duration < 0.0 {
            return bad("slop, baumgarte_beta and sim_duration must be >= 0");
        }
        Ok(())
    }

    /// Moment of inertia of one square block about its centre.
    pub fn inertia(&self) -> f64 {
        self.mass * self.side * self.side / 6.0
    }
}

/// Pose and velocity of one block's centre of mass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl BlockPose {
    pub fn at_rest(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta,
            ..Default::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.vx, self.vy, self.omega]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Half of the vertical extent of a square of half-size `half` at this rotation.
    pub fn half_height(&self, half: f64) -> f64 {
        half * (self.theta.cos().abs() + self.theta.sin().abs())
    }
}

/// Block colour classes. Mask ids follow the discriminants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum BlockClass {
    Red = 1,
    Green = 2,
    Blue = 3,
    Yellow = 4,
}

impl BlockClass {
    pub const ALL: [BlockClass; 4] = [
        BlockClass::Red,
        BlockClass::Green,
        BlockClass::Blue,
        BlockClass::Yellow,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Self::Red),
            2 => Some(Self::Green),
            3 => Some(Self::Blue),
            4 => Some(Self::Yellow),
            _ => None,
        }
    }
}

/// A vertical stack of 2 to 4 blocks, listed bottom to top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerScene {
    blocks: Vec<BlockPose>,
    class_ids: Vec<BlockClass>,
    params: PhysicsParams,
}

impl TowerScene {
    pub const MIN_BLOCKS: usize = 2;
    pub const MAX_BLOCKS: usize = 4;

    pub fn new(
        blocks: Vec<BlockPose>,
        class_ids: Vec<BlockClass>,
        params: PhysicsParams,
    ) -> Result<Self, PhysicsError> {
        params.validate()?;
        let n = blocks.len();
        if !(Self::MIN_BLOCKS..=Self::MAX_BLOCKS).contains(&n) {
            return Err(PhysicsError::InvalidScene(format!(
                "tower must have 2..=4 blocks, got {n}"
            )));
        }
        if class_ids.len() != n {
            return Err(PhysicsError::InvalidScene(format!(
                "{} class ids for {n} blocks",
                class_ids.len()
            )));
        }
        for (i, c) in class_ids.iter().enumerate() {
            if class_ids[..i].contains(c) {
                return Err(PhysicsError::InvalidScene(format!("duplicate class {c:?}")));
            }
        }
        if let Some(i) = blocks.iter().position(|b| !b.is_finite()) {
            return Err(PhysicsError::InvalidScene(format!("block {i} is not finite")));
        }
        let half = params.side / 2.0;
        let bottom_gap = blocks[0].y - blocks[0].half_height(half);
        if bottom_gap.abs() > params.slop {
            return Err(PhysicsError::InvalidScene(format!(
                "bottom block is {bottom_gap} above the ground"
            )));
        }
        for i in 0..n - 1 {
            let top = blocks[i].y + blocks[i].half_height(half);
            let bottom = blocks[i + 1].y - blocks[i + 1].half_height(half);
            let gap = bottom - top;
            if gap.abs() > params.slop {
                return Err(PhysicsError::InvalidScene(format!(
                    "block {} does not rest on block {i} (gap {gap})",
                    i + 1
                )));
            }
        }
        Ok(Self {
            blocks,
            class_ids,
            params,
        })
    }

    /// Stack with the given horizontal centres and rotations, each block
    /// resting on the bounding extent of the one below.
    pub fn stacked(
        xs: &[f64],
        thetas: &[f64],
        class_ids: Vec<BlockClass>,
        params: PhysicsParams,
    ) -> Result<Self, PhysicsError> {
        if xs.len() != thetas.len() {
            return Err(PhysicsError::InvalidScene(
                "xs and thetas differ in length".to_string(),
            ));
        }
        let half = params.side / 2.0;
        let mut blocks = Vec::with_capacity(xs.len());
        let mut floor = 0.0;
        for (&x, &theta) in xs.iter().zip(thetas) {
            let mut pose = BlockPose::at_rest(x, 0.0, theta);
            let hh = pose.half_height(half);
            pose.y = floor + hh;
            floor = pose.y + hh;
            blocks.push(pose);
        }
        Self::new(blocks, class_ids, params)
    }

    /// Axis-aligned stack with default classes red, green, blue, yellow.
    pub fn aligned(xs: &[f64], params: PhysicsParams) -> Result<Self, PhysicsError> {
        let classes = BlockClass::ALL.iter().copied().take(xs.len()).collect();
        Self::stacked(xs, &vec![0.0; xs.len()], classes, params)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[BlockPose] {
        &self.blocks
    }

    pub fn class_ids(&self) -> &[BlockClass] {
        &self.class_ids
    }

    pub fn params(&self) -> &PhysicsParams {
        &self.params
    }
}
