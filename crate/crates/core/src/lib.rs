//! Multilingual voice conversion trained with a three-substep cycle.
//!
//! The generator ([`nets::Generator`]) converts a content mel to the timbre of
//! a reference mel. Training ([`trainer`]) alternates three conversions per
//! step: reconstruction of speaker 1, cross-lingual conversion of speaker 2's
//! speech to speaker 1's voice, and reconstruction of speaker 1 using that
//! cross-lingual output as the timbre reference. Frozen auxiliary networks
//! ([`auxiliary`]) supply speaker, phoneme and pitch perceptual losses.

pub mod audio;
pub mod auxiliary;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod trainer;

pub use error::{Error, Result};
