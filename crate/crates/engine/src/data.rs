//! In-memory dataset backing the training loop, and deterministic batch
//! index selection.

use std::path::Path;

use dinomx_core::image::{load_image, load_roi, ImageSample, RoiMask};
use dinomx_core::manifest::read_manifest;
use dinomx_core::rng::{stream_rng, Stream};
use rand::Rng;

use crate::EngineError;

/// Every image (and optional ROI) loaded up front; desk-scale datasets fit
/// comfortably in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageSample>,
    pub rois: Vec<Option<RoiMask>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_manifest(path: &Path) -> Result<Self, EngineError> {
        let manifest = read_manifest(path)?;
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut rois = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::with_capacity(manifest.entries.len());
        let mut ids = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let image = load_image(&entry.image_path)?;
            let roi = match &entry.roi_path {
                Some(rp) => {
                    let roi = load_roi(rp)?;
                    roi.matches(&image)?;
                    Some(roi)
                }
                None => None,
            };
            ids.push(image.source_id.clone());
            images.push(image);
            rois.push(roi);
            labels.push(entry.class_label);
        }
        Ok(Self {
            images,
            rois,
            labels,
            ids,
            num_classes: manifest.num_classes,
        })
    }

    /// Builds a dataset directly from in-memory samples (tests, synthetic
    /// data).
    pub fn from_samples(
        images: Vec<ImageSample>,
        rois: Vec<Option<RoiMask>>,
        labels: Vec<usize>,
    ) -> Self {
        let ids = images.iter().map(|i| i.source_id.clone()).collect();
        let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        Self {
            images,
            rois,
            labels,
            ids,
            num_classes,
        }
    }
}

/// Global batch indices for one iteration: a seeded draw without
/// replacement when shuffling, otherwise a sequential window. Identical on
/// every worker.
pub fn batch_indices(seed: u64, iteration: usize, n: usize, batch: usize, shuffle: bool) -> Vec<usize> {
    assert!(n > 0, "empty dataset");
    if !shuffle {
        return (0..batch).map(|i| (iteration * batch + i) % n).collect();
    }
    let mut rng = stream_rng(seed, Stream::Batch, &[iteration as u64]);
    if batch <= n {
        rand::seq::index::sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_batches_wrap_around() {
        let idx = batch_indices(0, 2, 5, 4, false);
        assert_eq!(idx, vec![3, 4, 0, 1]);
    }

    #[test]
    fn shuffled_batches_are_deterministic_and_duplicate_free() {
        let a = batch_indices(7, 3, 100, 16, true);
        let b = batch_indices(7, 3, 100, 16, true);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        let c = batch_indices(7, 4, 100, 16, true);
        assert_ne!(a, c);
    }
}
