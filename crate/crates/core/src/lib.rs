//! Skeleton-to-grid representation learning.
//!
//! A skeleton sequence with `N` joints is mapped onto a compact `H×W` grid
//! patch by a learnable cascade of up-sampling transforms (real matrices
//! mixing joints into grid nodes) and graph-node index transforms (binary
//! one-hot assignments learned through a real-valued assistant with a
//! straight-through gradient). The patch is then classified by a stack of
//! ordinary 2D spatial / 1D temporal convolution blocks.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

pub mod ablation;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod layout;
pub mod network;
pub mod run;
pub mod skeleton;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
