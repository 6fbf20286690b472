//! Feature-level clustering with basis-function variational autoencoders.
//!
//! The decoder maps a latent `z` to `K` shared basis functions; every
//! observed feature is assigned (softly, through a Categorical posterior)
//! to one basis, with its own positive scale `lambda` and optional latent
//! shift `delta`. Mixture weights carry a Dirichlet prior that is
//! marginalised in closed form (collapsed inference), which empties
//! surplus components when `K` is over-specified.
//!
//! Module map:
//!
//! * [`diffcore`]: dense arrays, MLPs with hand-written backward passes,
//!   Adam, reparameterised sampling and a finite-difference checker.
//! * [`specialfn`]: log-gamma, digamma, Beta/Dirichlet/NB/ZINB densities.
//! * [`model`]: encoder, basis decoder, likelihood heads.
//! * [`elbo`]: collapsed, non-collapsed and fixed-pi objectives.
//! * [`trainer`]: seeded training with restarts and checkpoints.
//! * [`data`]: synthetic generators, CSV ingestion, standardisation.
//! * [`metrics`]: V-measure, co-occurrence, similarity matrices, k-means.
//! * [`cli`]: the `basiscluster` command line.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod elbo;
pub mod error;
pub mod metrics;
pub mod model;
pub mod specialfn;
pub mod trainer;

pub use error::{Error, Result};
