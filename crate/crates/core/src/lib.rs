//! Desk-scale training and evaluation engine for camera ego-motion
//! classification with structured observation-think-answer responses.
//!
//! The crate couples a synthetic pinhole-projection environment (labeled
//! camera trajectories rendered into grid-pooled optical-flow features) with a
//! small recurrent token policy trained in two stages: supervised cold start
//! on templated reasoning traces, then group-relative policy optimization
//! with an EMA-stabilized advantage scale and a composite format/accuracy
//! reward. Every stage is deterministic given its seed.

pub mod config;
pub mod episodes;
pub mod eval;
pub mod geometry;
pub mod grpo;
pub mod ota;
pub mod policy;
pub mod sft;
pub mod vocab;

pub use config::RunConfig;
pub use geometry::{MotionFamily, MotionPrimitive};
pub use vocab::{TokenId, Vocabulary};
