//! Training denoisers from corrupted-only samples.
//!
//! A dataset holds pairs `(A x₀, A)`: linear measurements together with the
//! operator that produced them, never the clean `x₀`. Training further
//! corrupts each operator to `Ã`, feeds the network `Ã(x₀ + σ η)` and scores
//! its prediction only through `A`. Because the network cannot tell which
//! missing information was withheld on purpose, its best response is the
//! full conditional expectation `E[x₀ | Ãx_t, Ã]`.
//!
//! The crate is organised as:
//!
//! - [`corruption`]: operators, their sampling, and `E[AᵀA | Ã]`;
//! - [`schedule`]: variance-exploding noise and Tweedie's score;
//! - [`denoiser`]: the conditioned network with exact gradients;
//! - [`training`]: ambient, naive and clean objectives and the optimiser;
//! - [`oracle`]: exact posterior means for mixtures and finite sets;
//! - [`sampler`]: fixed-mask and reconstruction-guided generation;
//! - [`eval`]: sliced Wasserstein, energy distance, PSNR, memorisation;
//! - [`dataio`]: configuration, dataset files and run orchestration.

pub mod corruption;
pub mod dataio;
pub mod denoiser;
pub mod digest;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corruption.md")]
    mod corruption {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
