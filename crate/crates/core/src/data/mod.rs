//! Landmark dictionaries, frame tables and the synthetic frame generator.

mod dictionary;
mod frames;
mod synth;

pub use dictionary::{LandmarkDictionary, Patch};
pub use frames::{Dataset, Frame, FrameBatch, SequenceStats, MISSING};
pub use synth::{synth_generate, GroundTruth, SynthConfig};
