//! Numeric substrate: dense matrices, nonlinearities, an SPD solver, a
//! reverse-mode tape and AdamW.

pub mod gradcheck;
pub mod linalg;
mod matrix;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;

pub use linalg::solve_spd;
pub use matrix::Matrix;
pub use ops::{cosine_similarity, sigmoid, softmax};
pub use optim::{adamw_step, AdamW, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
