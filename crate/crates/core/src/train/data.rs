use std::path::Path;

use crate::backbone::{load_features, FrameFeatures};
use crate::dataset::{load_clip, Manifest, Split};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// One clip ready for the model: encoder output plus label and masks.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub features: FrameFeatures,
    /// `[T, H_img, W_img]` ground-truth ids.
    pub gt_masks: Option<Tensor>,
}

/// Loads one split of a manifest, encoding frames with the model's frozen
/// encoder unless precomputed features are listed.
pub fn load_split(manifest_path: impl AsRef<Path>, split: Split, model: &Model) -> Result<Vec<Sample>> {
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    let manifest = Manifest::load(manifest_path)?;
    manifest
        .split(split)
        .into_iter()
        .map(|entry| load_entry(root, entry, model))
        .collect()
}

pub fn load_entry(root: &Path, entry: &crate::dataset::ClipEntry, model: &Model) -> Result<Sample> {
    let clip = load_clip(root, entry)?;
    let features = match &entry.features {
        Some(f) => load_features(root.join(&f.cls), root.join(&f.grid))?,
        None => model.encode(&clip)?,
    };
    Ok(Sample {
        id: entry.id.clone(),
        label: entry.label,
        features,
        gt_masks: clip.gt_masks,
    })
}

/// Builds samples straight from a manifest without touching the disk.
pub fn generate_split(manifest: &Manifest, split: Split, model: &Model) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .into_iter()
        .map(|entry| {
            let clip = crate::dataset::generate(&manifest.spec(entry)?)?;
            Ok(Sample {
                id: entry.id.clone(),
                label: entry.label,
                features: model.encode(&clip)?,
                gt_masks: clip.gt_masks,
            })
        })
        .collect()
}
