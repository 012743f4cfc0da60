//! Digital over-the-air federated edge learning.
//!
//! Devices quantise their model updates against a popularity-ordered
//! codebook, transmit unsourced-random-access codewords that superimpose on a
//! noisy channel, and the base station recovers the per-codeword activity
//! counts with an unrolled approximate-message-passing decoder.
//!
//! Module map:
//! - [`ura_codebook`]: shared transmit codebook (`C = row_normalise(D W)`) and coherence analysis.
//! - [`quantizer`]: k-means++ quantisation codebook, popularity ordering, error feedback.
//! - [`channel`]: superposition AWGN uplink.
//! - [`decoder`]: AMP-DA-Net forward pass, baseline AMP-DA mode and post-processing.
//! - [`feel_sim`]: federated rounds, local training, dataset export.
//! - [`harness`]: configuration, weight files, metrics and the decode benchmark.
//! - [`fit`]: lightweight fitting used to produce the checked-in fixture weights.

pub mod channel;
pub mod decoder;
mod error;
pub mod feel_sim;
pub mod fit;
pub mod harness;
pub mod par;
pub mod quantizer;
pub mod rng;
pub mod ura_codebook;

pub use error::{Error, Result};
