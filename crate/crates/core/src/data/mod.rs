//! Input formats, vocabularies, temporal splitting and the synthetic
//! dataset generator.

pub mod catalogue;
pub mod interactions;
pub mod vocab;
pub mod features;
pub mod synth;
