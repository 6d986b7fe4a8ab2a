use rand::Rng as _;

use super::pairs::TrainingPair;
use crate::error::Result;
use crate::rng::stream_rng;
use crate::volume::Volume4D;

pub const DEFAULT_MIN_COVERAGE: f64 = 0.25;
const MAX_TRIES: usize = 1000;

fn crop(vol: &Volume4D, lo: [usize; 3], ext: [usize; 3]) -> Result<Volume4D> {
    let [nx, ny, _, nv] = vol.dims();
    let mut data = Vec::with_capacity(ext.iter().product::<usize>() * nv);
    for v in 0..nv {
        let src = vol.volume(v);
        for z in lo[2]..lo[2] + ext[2] {
            for y in lo[1]..lo[1] + ext[1] {
                let s = (z * ny + y) * nx + lo[0];
                data.extend_from_slice(&src[s..s + ext[0]]);
            }
        }
    }
    let mut out = Volume4D::new([ext[0], ext[1], ext[2], nv], data)?.with_voxel_size(vol.voxel_size());
    if let Some(s) = vol.scheme() {
        out = out.with_scheme(s.clone())?;
    }
    Ok(out)
}

fn crop_mask(mask: &[bool], dims: [usize; 3], lo: [usize; 3], ext: [usize; 3]) -> Vec<bool> {
    let mut out = Vec::with_capacity(ext.iter().product());
    for z in lo[2]..lo[2] + ext[2] {
        for y in lo[1]..lo[1] + ext[1] {
            let s = (z * dims[1] + y) * dims[0] + lo[0];
            out.extend_from_slice(&mask[s..s + ext[0]]);
        }
    }
    out
}

fn coverage(mask: &[bool], dims: [usize; 3], lo: [usize; 3], ext: [usize; 3]) -> f64 {
    let mut n = 0usize;
    for z in lo[2]..lo[2] + ext[2] {
        for y in lo[1]..lo[1] + ext[1] {
            let s = (z * dims[1] + y) * dims[0] + lo[0];
            n += mask[s..s + ext[0]].iter().filter(|&&m| m).count();
        }
    }
    n as f64 / ext.iter().product::<usize>() as f64
}

/// Block corners (x, y, z). Each corner is drawn uniformly until the block
/// is at least `min_coverage` brain; after 1000 misses the best-covered
/// draw is used. Block extents larger than the volume are clamped.
pub fn block_corners(mask: &[bool], dims: [usize; 3], block: [usize; 3], n_blocks: usize, seed: u64, min_coverage: f64) -> Vec<[usize; 3]> {
    let ext = [0, 1, 2].map(|a| block[a].min(dims[a]));
    (0..n_blocks)
        .map(|j| {
            let mut rng = stream_rng(seed, j as u64);
            let mut best = ([0; 3], -1.0);
            for _ in 0..MAX_TRIES {
                let lo = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - ext[a]));
                let c = coverage(mask, dims, lo, ext);
                if c >= min_coverage {
                    return lo;
                }
                if c > best.1 {
                    best = (lo, c);
                }
            }
            best.0
        })
        .collect()
}

/// `n_blocks` random sub-blocks of a pair, seed-deterministic.
pub fn extract_blocks(pair: &TrainingPair, block: [usize; 3], n_blocks: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    extract_blocks_with(pair, block, n_blocks, seed, DEFAULT_MIN_COVERAGE)
}

pub fn extract_blocks_with(
    pair: &TrainingPair,
    block: [usize; 3],
    n_blocks: usize,
    seed: u64,
    min_coverage: f64,
) -> Result<Vec<TrainingPair>> {
    let dims = pair.spatial_dims();
    let ext = [0, 1, 2].map(|a| block[a].min(dims[a]));
    block_corners(&pair.mask, dims, block, n_blocks, seed, min_coverage)
        .into_iter()
        .map(|lo| {
            TrainingPair::new(
                crop(&pair.input, lo, ext)?,
                crop(&pair.target, lo, ext)?,
                crop_mask(&pair.mask, dims, lo, ext),
                pair.subject_id.clone(),
                pair.subset_id,
            )
        })
        .collect()
}

fn flip_x(data: &mut [f64], nx: usize) {
    for row in data.chunks_exact_mut(nx) {
        row.reverse();
    }
}

/// Mirror image along x of a pair: spatial data and mask only, channel
/// order untouched.
pub fn flip_pair(pair: &TrainingPair) -> TrainingPair {
    let nx = pair.spatial_dims()[0];
    let mut out = pair.clone();
    flip_x(out.input.data_mut(), nx);
    flip_x(out.target.data_mut(), nx);
    for row in out.mask.chunks_exact_mut(nx) {
        row.reverse();
    }
    out
}

/// The blocks followed by their x-mirrored copies.
pub fn augment_flip(blocks: &[TrainingPair]) -> Vec<TrainingPair> {
    blocks.iter().cloned().chain(blocks.iter().map(flip_pair)).collect()
}
