//! Coarse-to-fine cascaded 3D segmentation of hierarchically nested regions.
//!
//! Three binary encoder–decoder networks are chained so that each step's
//! predicted foreground gates the input of the next, segmenting whole
//! tumor → tumor core → enhancing tumor from multi-modal volumes. The crate
//! carries the whole pipeline around that idea: synthetic phantom generation,
//! bias-field correction and normalization, patch sampling and augmentation,
//! focal-loss training with deep supervision, sliding-window inference with
//! hierarchical label fusion, and the volumetric evaluation suite
//! (Dice, sensitivity, specificity, Hausdorff, boxplot summaries).

pub mod augment;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod infer;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod patch;
mod poly;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelMap, ModalityStack, Modality, Region, RegionMask, Spacing};
