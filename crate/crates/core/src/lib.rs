//! Streaming speaker-adaptation toolkit: synthetic multi-speaker corpus,
//! mel-filterbank frontend, spectral-basis features, variance-regularized
//! speaker embeddings, LHUC / f-LHUC adaptation and the evaluation machinery
//! (frame error rates, latency benchmarks, homogeneity analysis).

pub mod am;
pub mod corpus;
pub mod eval;
pub mod featio;
pub mod flhuc;
pub mod frontend;
pub mod lhuc;
pub mod nn;
pub mod sbe;
pub mod spectral;

pub use frontend::{FrameSpec, MelSpectrogram};
