//! Target-masked speaker embedding extraction, desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — f64 tensors with reverse-mode autodiff on an explicit tape
//! * [`features`] — WAV input, log mel filterbanks, activity masks, RTTM
//! * [`layers`] — masked statistics layers (SE, context-aware masking,
//!   batch norm, attentive stats pooling)
//! * [`encoder`] — the two small encoder families and checkpointing
//! * [`synth`] — synthetic speakers, mixtures, trials, conversations
//! * [`train`] — margin softmax, cyclical LR, Adam, the training loop
//! * [`eval`] — verification scoring, EER, bootstrap, duration sweeps,
//!   diarization and DER
//! * [`config`] — run configuration shared by the CLI and the test suites
//! * [`checks`] — self-check and gradient-check suites used by the CLI

pub mod checks;
pub mod config;
pub mod encoder;
pub mod eval;
pub mod features;
pub mod layers;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

/// Checkpoint / artifact format version; bump on incompatible change.
pub const FORMAT_VERSION: u32 = 1;
