//! Peptide design by latent-space optimization: a recurrent autoencoder over
//! five-residue peptides, a property surrogate, CMA-ES in the latent space,
//! sampler collection from the optimizer's trajectory, evaluation against
//! baselines and Gibbs clustering of the final candidates. [`pipeline`] wires
//! the stages together.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alphabet;
pub mod cmaes;
pub mod collector;
pub mod data;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod gmm;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod stats;
pub mod surrogate;
pub mod util;
pub mod wae;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/sequences.md")]
mod book_sequences {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/oracle.md")]
mod book_oracle {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/autoencoder.md")]
mod book_autoencoder {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/surrogate.md")]
mod book_surrogate {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/optimizer.md")]
mod book_optimizer {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/collection.md")]
mod book_collection {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/selection.md")]
mod book_selection {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod book_pipeline {}
