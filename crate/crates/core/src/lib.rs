//! Desk-scale reward-guided test-time adaptation for sequence transcription.
//!
//! A miniature encoder–decoder transcriber reads log-mel spectrograms of a
//! synthetic tone-speech corpus and emits character sequences. At test time,
//! each utterance is adapted episodically: a soft prompt is injected into
//! the decoder, temperature-sampled counterfactual transcriptions are scored
//! by a frozen contrastive audio–text reward model (optionally blended with
//! a character LM), and a policy-gradient step nudges model and prompt
//! toward higher-reward outputs before the state is restored bit-exactly.
//!
//! Crate layout follows the pipeline:
//! [`autodiff`] → [`signal`] → [`model`] → [`reward`] → [`adapt`] →
//! [`metrics`]/[`report`], with [`pipeline`] wiring end-to-end experiments.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod par;
pub mod reward;
pub mod rng;
pub mod signal;

pub use error::{Error, Result};
