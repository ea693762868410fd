//! Reverse-mode autodiff over dense tensors, sized for small transformer
//! models trained on a single CPU core.
//!
//! The substrate is eager: every op computes its forward value immediately
//! and records itself on a tape owned by [`Graph`]. [`Graph::backward`] walks
//! the tape in reverse and returns per-node gradients. The graph is
//! *reusable*: `backward` borrows it immutably and may be called repeatedly;
//! the usual pattern is one fresh graph per training step.
//!
//! Element type is generic over [`Scalar`] (`f32` for training speed, `f64`
//! for gradient checks and bit-exact determinism tests).

mod backward;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod param;
mod rng;
mod scalar;
mod shape;

pub use backward::Gradients;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use error::AdError;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, NodeId, Tensor};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{seeded_rng, Stream};
pub use scalar::Scalar;

pub type Result<V> = std::result::Result<V, AdError>;
