//! Single-shot meta-pruning of attention heads at desk scale.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod hash;
pub mod metatrain;
pub mod objective;
pub mod optim;
pub mod pretrain;
pub mod pruner;

pub use error::{Error, Result};
