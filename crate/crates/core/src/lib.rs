//! Stochastic weight averaging for small analytic models.
//!
//! The crate is organised bottom-up:
//!
//! - [`param`]: flat, group-segmented parameter vectors and their arithmetic.
//! - [`model`]: fully connected networks with analytic gradients, plus quadratic surrogates.
//! - [`data`]: synthetic datasets, CSV loading and seeded minibatches.
//! - [`optim`]: learning-rate schedules (constant, high-constant, cyclical, linear decay)
//!   and SGD / momentum / AdamW.
//! - [`swa`] and [`train`]: the running weight average, the two-stage training loop and
//!   offline checkpoint soups.
//! - [`flatness`]: Hessian eigenvalue and trace estimates through finite-difference
//!   Hessian-vector products.
//! - [`checkpoint`]: the `SWCK` binary format.
//! - [`experiment`]: configuration, run directories and the commands behind the `swa` CLI.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flatness;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod swa;
pub mod train;

pub use error::{Error, Result};
pub use param::{GroupMask, ParamVector};
