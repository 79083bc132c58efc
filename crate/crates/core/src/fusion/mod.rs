//! Goal/observation fusion encoders sharing one residual backbone layout.

mod backbone;
mod config;
mod eigencam;
mod encoder;

pub use backbone::{Backbone, FilmFactors, ResBlock, Stem, Trace};
pub use config::{BackboneSpec, BlockSpec, EarlyConcat, FilmPlacement, FusionConfig, Mechanism, MidMapping, Modeling, StemSpec};
pub use eigencam::eigencam;
pub use encoder::{early_input, keypoint_tensor, stack_images, AffineMap, EncoderInput, EncoderOutput, FusionEncoder};
