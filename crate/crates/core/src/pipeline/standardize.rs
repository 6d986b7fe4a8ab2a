use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BrainMask, Volume4D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: f64,
    pub std: f64,
}

impl StandardizationParams {
    /// Mean and (population) standard deviation over all channels of the
    /// brain voxels of `vol`.
    pub fn from_volume(vol: &Volume4D, mask: &BrainMask) -> Result<Self> {
        mask.check_matches(vol.spatial_dims())?;
        let mut n = 0usize;
        let mut sum = 0.0;
        for v in 0..vol.n_volumes() {
            let data = vol.volume(v);
            for i in mask.indices() {
                sum += data[i];
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::DegenerateInput("standardisation over an empty mask".into()));
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for v in 0..vol.n_volumes() {
            let data = vol.volume(v);
            for i in mask.indices() {
                ss += (data[i] - mean).powi(2);
            }
        }
        let std = (ss / n as f64).sqrt();
        if !(std > 1e-12) {
            return Err(Error::DegenerateInput(format!("brain intensities have zero variance (std {std:e})")));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

fn map_masked(vol: &Volume4D, mask: &BrainMask, f: impl Fn(f64) -> f64) -> Volume4D {
    let mut out = vol.clone();
    let m = mask.data();
    for v in 0..out.n_volumes() {
        for (x, &inside) in out.volume_mut(v).iter_mut().zip(m) {
            *x = if inside { f(*x) } else { 0.0 };
        }
    }
    out
}

/// Standardises with parameters from `vol` itself. Outside-mask voxels become 0.
pub fn standardize(vol: &Volume4D, mask: &BrainMask) -> Result<(Volume4D, StandardizationParams)> {
    let params = StandardizationParams::from_volume(vol, mask)?;
    Ok((standardize_with(vol, mask, &params), params))
}

pub fn standardize_with(vol: &Volume4D, mask: &BrainMask, params: &StandardizationParams) -> Volume4D {
    map_masked(vol, mask, |x| params.apply(x))
}

pub fn destandardize(vol: &Volume4D, mask: &BrainMask, params: &StandardizationParams) -> Volume4D {
    map_masked(vol, mask, |x| params.invert(x))
}
