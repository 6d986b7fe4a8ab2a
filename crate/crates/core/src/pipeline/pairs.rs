use crate::error::{Error, Result};
use crate::volume::Volume4D;

/// Network input, target and the brain mask that weights the loss. Channel 0
/// is the b=0 channel in both input and target. The mask may be empty for a
/// block that misses the brain; training skips such blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Volume4D,
    pub target: Volume4D,
    pub mask: Vec<bool>,
    pub subject_id: String,
    pub subset_id: usize,
}

impl TrainingPair {
    pub fn new(input: Volume4D, target: Volume4D, mask: Vec<bool>, subject_id: impl Into<String>, subset_id: usize) -> Result<Self> {
        if input.dims() != target.dims() {
            return Err(Error::Shape(format!("input {:?} vs target {:?}", input.dims(), target.dims())));
        }
        if mask.len() != input.n_voxels() {
            return Err(Error::Shape(format!("mask has {} voxels, image {}", mask.len(), input.n_voxels())));
        }
        Ok(Self { input, target, mask, subject_id: subject_id.into(), subset_id })
    }

    pub fn channels(&self) -> usize {
        self.input.n_volumes()
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        self.input.spatial_dims()
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
