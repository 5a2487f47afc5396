//! Adam-NSCL: continual learning by training in the null space of the
//! feature covariance of previous tasks.
//!
//! A small feed-forward network is trained on a stream of tasks. After each
//! task, the per-layer uncentered covariance of the input features is folded
//! into a running covariance ([`covtrack`]). Before the next task, the
//! approximate null space of each covariance is extracted from its
//! eigendecomposition ([`nullspace`]), and every Adam update on later tasks
//! is projected into that subspace ([`optim`]), which preserves the network
//! outputs on earlier tasks while leaving room to learn the new one.
//! [`harness`] drives task sequences, computes ACC/BWT, and hosts the
//! verification suites for the stability and plasticity properties.

pub mod covtrack;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod nullspace;
pub mod optim;

pub use error::{Error, Result};
