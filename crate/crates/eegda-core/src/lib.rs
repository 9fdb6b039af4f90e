//! Cross-dataset EEG classification under domain shift.
//!
//! The crate covers the full path from raw multi-channel signals to adapted
//! predictions: band-power feature extraction ([`sigproc`]), a small
//! two-classifier feed-forward network with hand-derived gradients ([`net`]),
//! the training objectives ([`losses`]), cluster statistics and confident-
//! prediction selection ([`clusterstats`]), the staged training pipeline with
//! gradual target selection ([`pipeline`]), confidence-gated test-time
//! augmentation ([`pctta`]), evaluation metrics and ablations ([`evalkit`]),
//! and file formats plus a synthetic domain-shift benchmark ([`dataio`]).

pub mod clusterstats;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod net;
pub mod pctta;
pub mod pipeline;
pub mod linalg;
pub mod rngutil;
pub mod sigproc;

pub use error::{CoreError, ErrorClass, Result};
