#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod font;
pub mod image;
pub mod losses;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod seed;
pub mod synth;
pub mod tensorfile;

pub use encoder::{ConditionEncoder, EncoderConfig, FeatureBundle, TokenSequence};
pub use error::{Error, Result};
pub use image::{Image, Mask, ReferenceSet};
pub use modulation::{ModulationConfig, ModulationNet};
pub use seed::Seed;
