//! Constrained block-structured neural state space models for nonlinear
//! system identification.
//!
//! The crate is layered bottom-up:
//!
//! * [`diffcore`]: dense matrices and a reverse-mode tape.
//! * [`linmaps`]: dense, Perron-Frobenius, soft SVD and Householder-spectral
//!   linear maps.
//! * [`blocks`]: MLP, residual MLP and RNN blocks.
//! * [`ssm`]: model classes (unstructured, block nonlinear, Hammerstein,
//!   Hammerstein-Wiener, Wiener, linear), observer and rollout.
//! * [`objective`]: N-step MSE, constraint penalties, smoothing, AdamW.
//! * [`systems`]: CSTR and two-tank emulators, dataset I/O and windowing.
//! * [`harness`]: training, evaluation, ablations, grid search, spectra.

pub mod blocks;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod init;
pub mod linmaps;
pub mod objective;
pub mod ssm;
pub mod systems;

pub use error::{Error, Result};
