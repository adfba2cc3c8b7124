//! Groupwise multi-modal diffeomorphic image registration.
//!
//! Each image of a group is explained by a shared categorical anatomy seen
//! through a modality-specific intensity lookup and an image-specific
//! diffeomorphism `exp(v_j)` parameterised by a stationary velocity field.
//! Registration maximises a variational lower bound whose structural term is
//! the average KL divergence from the voxelwise geometric mean of the
//! single-view posteriors to each of them, and whose velocity updates are
//! symmetric Demons steps computed on the probability maps.
//!
//! Module map:
//!
//! - [`grid`]: field containers, interpolation, warping, gradients, Jacobians.
//! - [`diffeo`]: SVF exponential, composition, centering, level aggregation.
//! - [`structrep`]: single-view extraction and posterior fusion.
//! - [`demons`]: symmetric Demons force and fluid smoothing.
//! - [`sampling`]: Gumbel-Max, Straight-Through Gumbel-Softmax, Gumbel-Rao.
//! - [`generative`]: codebook decoder, likelihood, velocity prior, objective.
//! - [`engine`]: the coarse-to-fine groupwise loop.
//! - [`metrics`] and [`synth`]: evaluation and synthetic phantoms.
//! - [`io`] and [`config`]: file formats and run configuration.
//! - [`experiment`]: phantom recovery runs and group-size sweeps.

pub mod config;
pub mod demons;
pub mod diffeo;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod generative;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod sampling;
pub mod structrep;
pub mod synth;

pub use error::{Error, Result};
