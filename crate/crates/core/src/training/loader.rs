use std::collections::HashMap;

use ndarray::{Array3, Array4, Axis};

use crate::error::Result;
use crate::ingest::ImageRecord;
use crate::splitter::Split;
use crate::transforms::{
    augment, load_image, preprocess_raw, record_rng, should_augment, AugmentPolicy, AugmentTarget,
};

/// Preprocessed tensors above this total size are not kept in memory.
pub const CACHE_LIMIT_BYTES: usize = 512 << 20;

/// Decodes, augments and normalizes records into model input batches.
///
/// Augmentation streams are keyed by record identity, so a record always
/// yields the same tensor and caching does not change results.
pub struct ImageLoader {
    size: usize,
    policy: AugmentPolicy,
    target: AugmentTarget,
    cache: Option<HashMap<(String, u32, bool), Array3<f64>>>,
}

impl ImageLoader {
    pub fn new(size: usize, policy: AugmentPolicy, target: AugmentTarget) -> Self {
        ImageLoader {
            size,
            policy,
            target,
            cache: None,
        }
    }

    /// Enables the tensor cache when `records` fit under [`CACHE_LIMIT_BYTES`].
    pub fn with_cache_for(mut self, records: usize) -> Self {
        let bytes = records * self.size * self.size * 3 * std::mem::size_of::<f64>();
        if bytes <= CACHE_LIMIT_BYTES {
            self.cache = Some(HashMap::new());
        }
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn load(&mut self, record: &ImageRecord, split: Split) -> Result<Array3<f64>> {
        let augmented = should_augment(record, split, self.target);
        let key = (record.image_id.clone(), record.source.replica_index(), augmented);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit.clone());
        }
        let mut raw = load_image(&record.path)?;
        if augmented {
            let mut rng = record_rng(self.policy.rng_seed, &record.image_id, key.1);
            raw = augment(&raw, &self.policy, &mut rng);
        }
        let tensor = preprocess_raw(&raw, self.size).0;
        if let Some(cache) = &mut self.cache {
            cache.insert(key, tensor.clone());
        }
        Ok(tensor)
    }

    pub fn batch(&mut self, records: &[&ImageRecord], split: Split) -> Result<Array4<f64>> {
        let mut x = Array4::zeros((records.len(), 3, self.size, self.size));
        for (i, r) in records.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&self.load(r, split)?);
        }
        Ok(x)
    }
}
