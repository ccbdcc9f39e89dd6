//! Labeled image sets, IDX loading and synthetic generation.

mod dataset;
pub mod export;
pub mod idx;
pub mod results;
pub mod synthetic;

pub use dataset::{ImageShape, LabeledImageSet};
pub use idx::load_idx;
pub use synthetic::{gen_synthetic, SyntheticSpec};
