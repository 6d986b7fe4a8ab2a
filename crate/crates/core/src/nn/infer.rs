use serde::{Deserialize, Serialize};

use super::model::DenoiserModel;
use super::tensor::Tensor5;
use super::{tensor_from_volume, volume_from_tensor};
use crate::error::{Error, Result};
use crate::pipeline::{destandardize, StandardizationParams};
use crate::volume::{BrainMask, Volume4D};

/// Inference tiling. `tile = 0` runs the whole volume at once. Each tile's
/// core is grown by `margin` voxels of context on every side and only the
/// core is kept. A margin of at least the receptive radius makes tiled
/// output identical to whole-volume output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileConfig {
    pub tile: usize,
    pub margin: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { tile: 64, margin: 10 }
    }
}

impl TileConfig {
    pub fn whole() -> Self {
        Self { tile: 0, margin: 0 }
    }

    /// Tile of `tile` voxels with the largest of 8 and the model's receptive radius as margin.
    pub fn for_model(model: &DenoiserModel, tile: usize) -> Self {
        Self { tile, margin: model.receptive_radius().max(8) }
    }
}

fn crop(x: &Tensor5<f32>, lo: [usize; 3], hi: [usize; 3]) -> Tensor5<f32> {
    let [n, c, _, ny, nx] = x.shape();
    let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut out = Tensor5::zeros([n, c, ext[0], ext[1], ext[2]]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.channel(b, ch);
            let dst = out.channel_mut(b, ch);
            for z in 0..ext[0] {
                for y in 0..ext[1] {
                    let s = ((lo[0] + z) * ny + lo[1] + y) * nx + lo[2];
                    let d = (z * ext[1] + y) * ext[2];
                    dst[d..d + ext[2]].copy_from_slice(&src[s..s + ext[2]]);
                }
            }
        }
    }
    out
}

/// Inference-mode forward over a (possibly large) standardised tensor.
pub fn denoise_tensor(model: &DenoiserModel, x: &Tensor5<f32>, tiles: &TileConfig) -> Result<Tensor5<f32>> {
    if x.channels() != model.channels() {
        return Err(Error::Shape(format!("model expects {} channels, got {}", model.channels(), x.channels())));
    }
    let dims = x.spatial();
    if tiles.tile == 0 || dims.iter().all(|&d| d <= tiles.tile) {
        return model.forward(x);
    }
    let [n, c, ..] = x.shape();
    let mut out = Tensor5::zeros(x.shape());
    let starts = |d: usize| (0..d).step_by(tiles.tile).collect::<Vec<_>>();
    for &z0 in &starts(dims[0]) {
        for &y0 in &starts(dims[1]) {
            for &x0 in &starts(dims[2]) {
                let core_lo = [z0, y0, x0];
                let core_hi = [0, 1, 2].map(|a| (core_lo[a] + tiles.tile).min(dims[a]));
                let lo = [0, 1, 2].map(|a| core_lo[a].saturating_sub(tiles.margin));
                let hi = [0, 1, 2].map(|a| (core_hi[a] + tiles.margin).min(dims[a]));
                let y = model.forward(&crop(x, lo, hi))?;
                let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                for b in 0..n {
                    for ch in 0..c {
                        let src = y.channel(b, ch);
                        let dst = out.channel_mut(b, ch);
                        let w = core_hi[2] - core_lo[2];
                        for z in core_lo[0]..core_hi[0] {
                            for yy in core_lo[1]..core_hi[1] {
                                let s = ((z - lo[0]) * ext[1] + yy - lo[1]) * ext[2] + core_lo[2] - lo[2];
                                let d = (z * dims[1] + yy) * dims[2] + core_lo[2];
                                dst[d..d + w].copy_from_slice(&src[s..s + w]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Denoises a standardised volume and maps the result back to signal units.
/// Voxels outside the mask are zero.
pub fn denoise_volume(
    model: &DenoiserModel,
    standardized: &Volume4D,
    mask: &BrainMask,
    params: &StandardizationParams,
    tiles: &TileConfig,
) -> Result<Volume4D> {
    mask.check_matches(standardized.spatial_dims())?;
    let y = denoise_tensor(model, &tensor_from_volume(standardized), tiles)?;
    let mut vol = volume_from_tensor(&y)?.with_voxel_size(standardized.voxel_size());
    if let Some(s) = standardized.scheme() {
        vol = vol.with_scheme(s.clone())?;
    }
    Ok(destandardize(&vol, mask, params))
}
