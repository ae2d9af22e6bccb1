//! Batch construction: paired augmentations of source images, mixup image
//! synthesis, synthetic anatomical scenes, and reference mask handling.
//!
//! Images are (C,H,W) f32 tensors in [0,1]. Sample generation is pure per
//! (index, seed); workers derive per-sample seeds as global_seed XOR index.

mod augment;
mod io;
mod scene;

pub use augment::{augment_pair, AugmentConfig};
pub use io::{load_dataset, load_image, load_reference_masks, save_image};
pub use scene::{
    generate_ellipse_reference, generate_synthetic_dataset, EllipsePriors, SceneLayout,
    SyntheticDataset, SyntheticSceneSpec, STRUCTURE_NAMES,
};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two augmented views of one source image.
#[derive(Debug, Clone)]
pub struct SampleGroup {
    pub view_a: Array3<f32>,
    pub view_b: Array3<f32>,
    /// Index of the source image in its dataset.
    pub source_id: usize,
}

/// A virtual sample blended from two parents' first views.
#[derive(Debug, Clone)]
pub struct MixupSample {
    /// lambda * parent_a.view_a + (1 - lambda) * parent_b.view_a, pixelwise.
    pub image: Array3<f32>,
    /// Blend weight, strictly inside (0,1).
    pub lambda: f64,
    /// Positions of the two parents in the batch's group list.
    pub parent_ids: (usize, usize),
}

/// Where a set of reference masks came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Real,
    SimilarStructure,
    Simulated,
}

/// Unpaired binary masks of plausible structure shapes, used as the
/// discriminator's real examples. Sample k holds one channel per structure,
/// ordered as `structure_names`.
#[derive(Debug, Clone)]
pub struct ReferenceMaskSet {
    pub structure_names: Vec<String>,
    /// Per sample: (K,H,W) with entries in {0,1}.
    pub masks: Vec<Array3<f32>>,
    pub source_kind: SourceKind,
    /// Non-fatal observations from loading, e.g. thresholded gray masks.
    pub warnings: Vec<String>,
}

impl ReferenceMaskSet {
    pub fn new(
        structure_names: Vec<String>,
        masks: Vec<Array3<f32>>,
        source_kind: SourceKind,
    ) -> Result<Self> {
        let k = structure_names.len();
        if k == 0 {
            return Err(Error::invalid("reference masks", "no structures named"));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.dim().0 != k {
                return Err(Error::invalid(
                    "reference masks",
                    format!("sample {i} has {} channels, expected {k}", m.dim().0),
                ));
            }
            if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(
                    "reference masks",
                    format!("sample {i} is not binary"),
                ));
            }
        }
        Ok(ReferenceMaskSet {
            structure_names,
            masks,
            source_kind,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Channel index of a structure name.
    pub fn channel(&self, structure: &str) -> Option<usize> {
        self.structure_names.iter().position(|s| s == structure)
    }
}

/// Blend `count` virtual samples from the groups' first views. Each sample
/// draws two distinct parents and lambda ~ U(0,1).
pub fn make_mixup(
    groups: &[SampleGroup],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MixupSample>> {
    if groups.len() < 2 {
        return Err(Error::invalid(
            "mixup",
            format!("need at least 2 groups, got {}", groups.len()),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.gen_range(0..groups.len());
        let b = loop {
            let j = rng.gen_range(0..groups.len());
            if j != a {
                break j;
            }
        };
        // gen::<f64>() lies in [0,1); rejecting 0 leaves the open interval.
        let lambda = loop {
            let l = rng.gen::<f64>();
            if l > 0.0 {
                break l;
            }
        };
        let la = lambda as f32;
        let image = &groups[a].view_a * la + &groups[b].view_a * (1.0 - la);
        out.push(MixupSample {
            image,
            lambda,
            parent_ids: (a, b),
        });
    }
    Ok(out)
}
