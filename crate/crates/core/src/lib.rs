//! Aorta segmentation toolkit.
//!
//! A residual encoder-decoder network with deep supervision, trained with a
//! combined Dice + focal loss under a k-fold x repeat protocol, and applied
//! through a two-stage ensemble whose second stage sees the CT image
//! renormalized to the intensity range of the first stage's foreground.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod infer;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod normalize;
pub mod phantom;
pub mod segresnet;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Volume, VolumeKind};
