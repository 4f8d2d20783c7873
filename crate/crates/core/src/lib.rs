//! Flow matching (FM) and transition matching (TM) samplers on isotropic
//! Gaussian and Gaussian-mixture targets, with every learned component
//! replaced by its exact analytic oracle.
//!
//! The crate is organised bottom-up:
//!
//! - [`gaussian`]: targets, schedules and the scalar CondOT path functions.
//! - [`posterior`]: exact law of the difference latent `V = X1 - X0` given `X_t`.
//! - [`samplers`]: Monte Carlo FM Euler and nested TM samplers.
//! - [`recursion`]: sampling-free variance / KL recursions for unimodal targets.
//! - [`bounds`]: mixture local-unimodality bounds and their numerical oracles.
//! - [`divergence`]: closed-form and nearest-neighbour KL, cosine histograms.
//! - [`harness`]: config-driven experiments, CSV/SVG output, compute-cost model.

pub mod bounds;
pub mod divergence;
pub mod error;
pub mod gaussian;
pub mod harness;
mod plot;
pub mod posterior;
pub mod quadrature;
pub mod recursion;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
pub use gaussian::{
    path_coefficients, path_cross_covariance, path_variance, GaussianMixtureTarget, MixtureComponent, PathCoefficients,
    Schedule, Target, UnimodalGaussianTarget,
};
pub use posterior::{
    mixture_posterior, nearest_mode, responsibilities, sample_posterior, unimodal_posterior, DifferenceLaw,
    MixturePosterior, NearestModeInfo, UnimodalPosterior,
};
pub use samplers::{run_sampler, InnerMode, SampleBatch, SamplerKind, SamplerRun, SeedInfo};
