//! Infinite dynamic topic model over epoch-ordered document streams.
//!
//! Topics are born and die over time, their word distributions drift as a
//! logistic-normal random walk, and their popularity couples neighboring
//! epochs through an exponentially decayed table-count window. Inference is
//! collapsed Gibbs over the recurrent Chinese restaurant franchise seating,
//! with Metropolis-Hastings block updates for each topic's parameter chain.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod kernel;
pub mod rng;
pub mod sampler;
pub mod state;
pub mod topicdyn;

pub use corpus::{Corpus, Document, Vocabulary};
pub use error::{Error, Result};
pub use kernel::{DecayKernel, DecayedCounts};
pub use sampler::{fit, FitResult, GibbsSampler, Hyperparams, PosteriorSample, SamplerConfig};
pub use state::{SeatingState, TransitionCache};
pub use topicdyn::{DynamicsParams, GaussianBelief, TopicChain};
