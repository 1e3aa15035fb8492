//! Learning-to-rank microphone channel selection for distant speech.
//!
//! The crate covers feature extraction ([`dsp`]), a TCN channel ranker
//! ([`ranker`]), ranking losses ([`ltr`]), classical scorers
//! ([`selectors`]), a synthetic room simulator ([`scene`]), training
//! ([`trainer`]) and evaluation ([`eval`]).

pub mod commands;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod ltr;
pub mod manifest;
pub mod ranker;
pub mod scene;
pub mod selectors;
pub mod trainer;
pub mod verify;
pub mod wav;

pub use error::{Error, Result};
pub use selectors::ChannelScores;
