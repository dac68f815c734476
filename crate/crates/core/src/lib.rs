pub mod dataset;
pub mod eval;
pub mod learn;
pub mod physics;
pub mod pnm;
pub mod render;
pub mod rng;
pub mod scenegen;
