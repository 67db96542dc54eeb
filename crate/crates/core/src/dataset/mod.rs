//! Manifests, seen/unseen splits, synthetic data and image I/O.

pub mod imageio;
pub mod manifest;
pub mod split;
pub mod synth;

pub use manifest::{expand, load_manifest, normalize_label, write_manifest, ManifestLine, SampleRecord, Split, Triple};
pub use split::{split_seen_unseen, SplitReport};
pub use synth::{synth_generate, ShapeClass, SynthConfig};

use std::path::Path;

use crate::error::Result;
use crate::tensor::Tensor;

/// Loads a mask as a `[1, 1, H, W]` tensor, binarized at 128.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let (pixels, w, h) = imageio::load_gray(path)?;
    let data = pixels.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, 1, h as usize, w as usize], data)
}
