//! Differentiable-computation layer: dense arrays, the reverse-mode
//! tape, named parameters, attention, AdamW, and the finite-difference
//! gradient oracle.

pub mod adamw;
pub mod array;
pub mod attention;
pub mod gradcheck;
pub mod nn;
pub mod param;
pub mod rng;
pub mod tape;

pub use adamw::{AdamWConfig, AdamWState};
pub use array::DenseArray;
pub use attention::{attention, AttentionWeights};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_FD_STEP, DEFAULT_FD_TOL};
pub use nn::{LinearWeights, MlpWeights};
pub use param::{ParamSet, Parameter, Session};
pub use rng::{seeded, substream, Prng};
pub use tape::{hstack, mean_scalars, sum_scalars, vstack, Tape, Tensor};
