//! Text-conditioned symbolic music generation at desk scale.
//!
//! The pipeline runs MIDI bytes through [`midi`] into note lists, tokenizes
//! them with the REMI+ scheme in [`remi`], derives objective attributes
//! ([`attributes`]) and pseudo captions ([`captions`]), trains a
//! cross-attending transformer decoder ([`model`]) and scores generated
//! pieces with the objective metrics in [`eval`].

pub mod attributes;
pub mod captions;
pub mod corpus;
pub mod eval;
pub mod midi;
pub mod model;
pub mod remi;
pub mod training;
