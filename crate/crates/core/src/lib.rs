//! Granularity-scored mask hierarchies from unlabeled patch features.
//!
//! The pipeline runs in four steps: [`divide`] discovers instance-level masks
//! with iterative normalized cuts, [`conquer`] decomposes each instance by
//! threshold-scheduled patch merging, and [`hierarchy`] ties the two together
//! into part/whole trees where every mask carries a continuous granularity in
//! `[0.1, 1.0]`. The resulting label sets answer `(point, granularity)`
//! queries directly, and [`eval`] scores any promptable segmenter with
//! click-simulation and average-recall protocols. [`decoder`] is a small
//! granularity-conditioned mask decoder trained on synthetic scenes.

pub mod conquer;
pub mod decoder;
pub mod divide;
pub mod eval;
pub mod features;
pub mod fixtures;
pub mod hierarchy;
pub mod mask;

pub use features::{read_features, write_features, PatchFeatureMap};
pub use mask::{BinaryMask, RleMask, ScoredMask};
