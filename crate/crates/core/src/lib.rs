//! Geometry-consistency reward for video frame pairs, a synthetic scene
//! oracle, a toy rectified-flow generator and a group-relative policy
//! optimization loop that fine-tunes it against the reward.

pub mod adapter;
pub mod camera;
pub mod gft;
pub mod grid;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod synth;
