//! Dense multi-branch trajectory distillation for diffusion models.
//!
//! The crate bundles everything needed to train a small diffusion teacher on
//! low-dimensional data, sample it with deterministic probability-flow
//! solvers, distill it with Progressive Distillation or trajectory-matching
//! (SFD-style) loops, with or without multi-branch dense supervision, and
//! evaluate the resulting students.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod schedule;
pub mod seed;
pub mod solvers;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use distill::{DistillConfig, DistillMethod, DistillReport};
pub use error::{Error, Result};
pub use net::{Denoiser, NetSpec, ScoreNet};
pub use schedule::{NoiseSchedule, Parameterization, ScheduleSpec, TimePoint};
pub use solvers::{SolverKind, TimeGrid, TrajectoryRecord};
pub use tape::{LossKind, Tape, Var};
pub use tensor::Tensor;
