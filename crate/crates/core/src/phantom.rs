//! Synthetic DTI scenes with known ground truth, and Rician-noise
//! acquisitions of them.
//!
//! A scene is an ellipsoidal "brain" (the mask) holding an isotropic
//! background, two crossing tracts with smoothly turning orientation, and a
//! block of thin alternating-FA stripes. A thin CSF shell with high
//! diffusivity surrounds the brain outside the mask; everything beyond it is
//! air with zero signal.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};
use crate::tensor_model::{synthesize_dwis, Tensor6, TensorField};
use crate::volume::{BrainMask, GradientScheme, Volume4D};

/// Region parameters for [`make_phantom`]. Diffusivities in μm²/ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub background_md: f64,
    pub tract_fa: f64,
    pub tract_md: f64,
    pub stripe_fa_high: f64,
    pub stripe_fa_low: f64,
    pub stripe_md: f64,
    /// Full period of the stripe pattern in voxels (two stripes).
    pub stripe_period: usize,
    pub csf_md: f64,
    pub rim_voxels: f64,
    pub s0: f64,
    /// Relative amplitude of the smooth S0 modulation.
    pub s0_modulation: f64,
    /// CSF S0 relative to tissue.
    pub csf_s0_ratio: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            background_md: 0.8,
            tract_fa: 0.8,
            tract_md: 0.7,
            stripe_fa_high: 0.9,
            stripe_fa_low: 0.3,
            stripe_md: 0.7,
            stripe_period: 4,
            csf_md: 3.0,
            rim_voxels: 2.0,
            s0: 1000.0,
            s0_modulation: 0.2,
            csf_s0_ratio: 1.5,
        }
    }
}

/// Region labels stored per voxel in [`PhantomScene::labels`].
pub mod region {
    pub const AIR: u8 = 0;
    pub const BACKGROUND: u8 = 1;
    pub const TRACT_ARC: u8 = 2;
    pub const TRACT_STRAIGHT: u8 = 3;
    pub const STRIPE_HIGH: u8 = 4;
    pub const STRIPE_LOW: u8 = 5;
    pub const CSF: u8 = 6;

    pub fn name(label: u8) -> &'static str {
        match label {
            AIR => "air",
            BACKGROUND => "isotropic background",
            TRACT_ARC => "curved tract",
            TRACT_STRAIGHT => "straight tract",
            STRIPE_HIGH => "stripe (high FA)",
            STRIPE_LOW => "stripe (low FA)",
            CSF => "csf rim",
            _ => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScene {
    /// Ground truth over brain and CSF; zero in air.
    pub tensor_field: TensorField,
    pub s0: Vec<f64>,
    /// Brain voxels (CSF rim excluded).
    pub mask: BrainMask,
    /// Brain plus CSF rim: every voxel with signal.
    pub tissue_mask: BrainMask,
    pub labels: Vec<u8>,
    pub spec: PhantomSpec,
}

impl PhantomScene {
    pub fn dims(&self) -> [usize; 3] {
        self.mask.dims()
    }

    pub fn s0_volume(&self) -> Volume4D {
        let [nx, ny, nz] = self.dims();
        Volume4D::new([nx, ny, nz, 1], self.s0.clone()).expect("finite S0")
    }

    /// Voxel counts per region label.
    pub fn region_counts(&self) -> Vec<(u8, usize)> {
        (region::AIR..=region::CSF)
            .map(|l| (l, self.labels.iter().filter(|&&x| x == l).count()))
            .collect()
    }

    /// Mean S0 over the brain mask.
    pub fn mean_s0(&self) -> f64 {
        let n = self.mask.count() as f64;
        self.mask.indices().map(|i| self.s0[i]).sum::<f64>() / n
    }

    /// Noise level giving a b=0 SNR of 30 on the brain-average S0.
    pub fn hcp_like_sigma(&self) -> f64 {
        self.mean_s0() / 30.0
    }
}

/// Axial/radial eigenvalues of a cylindrically symmetric tensor with the
/// given FA and mean diffusivity.
pub fn cylinder_eigenvalues(fa: f64, md: f64) -> (f64, f64) {
    // FA = (r−1)/√(r²+2) for r = λ∥/λ⊥
    let f2 = fa * fa;
    let a = 1.0 - f2;
    let disc = (1.0 - a * (1.0 - 2.0 * f2)).max(0.0);
    let r = (1.0 + disc.sqrt()) / a;
    let perp = 3.0 * md / (r + 2.0);
    (r * perp, perp)
}

/// `λ⊥·I + (λ∥ − λ⊥)·e eᵀ` for unit `e`.
pub fn cylinder_tensor(axial: f64, radial: f64, e: [f64; 3]) -> Tensor6 {
    let k = axial - radial;
    [
        radial + k * e[0] * e[0],
        radial + k * e[1] * e[1],
        radial + k * e[2] * e[2],
        k * e[0] * e[1],
        k * e[0] * e[2],
        k * e[1] * e[2],
    ]
}

fn isotropic(d: f64) -> Tensor6 {
    [d, d, d, 0.0, 0.0, 0.0]
}

/// Deterministic scene on an `nx × ny × nz` grid (each ≥ 16).
///
/// The geometry is fully determined by the shape and spec; `seed` only sets
/// the phase of the S0 modulation.
pub fn make_phantom(shape: [usize; 3], seed: u64, spec: &PhantomSpec) -> Result<PhantomScene> {
    if shape.iter().any(|&d| d < 16) {
        return Err(Error::InvalidInput(format!("phantom dims {shape:?} must each be >= 16")));
    }
    if spec.stripe_period < 2 {
        return Err(Error::InvalidInput("stripe period must be >= 2 voxels".into()));
    }
    let [nx, ny, nz] = shape;
    let mut rng = stream_rng(seed, 0);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * std::f64::consts::TAU);

    let (tract_ax, tract_rad) = cylinder_eigenvalues(spec.tract_fa, spec.tract_md);
    let (hi_ax, hi_rad) = cylinder_eigenvalues(spec.stripe_fa_high, spec.stripe_md);
    let (lo_ax, lo_rad) = cylinder_eigenvalues(spec.stripe_fa_low, spec.stripe_md);

    let half = [nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0];
    let radius = half.map(|h| h - spec.rim_voxels - 1.5);
    let n = nx * ny * nz;
    let mut tensors = vec![[0.0; 6]; n];
    let mut s0 = vec![0.0; n];
    let mut labels = vec![region::AIR; n];

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = (z * ny + y) * nx + x;
                // voxel centre relative to the grid centre
                let c = [x as f64 + 0.5 - half[0], y as f64 + 0.5 - half[1], z as f64 + 0.5 - half[2]];
                let p = [c[0] / half[0], c[1] / half[1], c[2] / half[2]];
                let inner = (0..3).map(|i| (c[i] / radius[i]).powi(2)).sum::<f64>();
                let outer = (0..3)
                    .map(|i| (c[i] / (radius[i] + spec.rim_voxels)).powi(2))
                    .sum::<f64>();
                let modulation = 1.0
                    + spec.s0_modulation
                        * (std::f64::consts::PI * 0.7 * p[0] + phase[0]).sin()
                        * (std::f64::consts::PI * 0.6 * p[1] + phase[1]).cos()
                        * (0.5 + 0.5 * (std::f64::consts::PI * 0.5 * p[2] + phase[2]).cos());
                if inner <= 1.0 {
                    let (label, t) = brain_voxel(x, p, spec, (tract_ax, tract_rad), (hi_ax, hi_rad), (lo_ax, lo_rad));
                    labels[v] = label;
                    tensors[v] = t;
                    s0[v] = spec.s0 * modulation;
                } else if outer <= 1.0 {
                    labels[v] = region::CSF;
                    tensors[v] = isotropic(spec.csf_md);
                    s0[v] = spec.s0 * spec.csf_s0_ratio * modulation;
                }
            }
        }
    }

    let mask = BrainMask::new(shape, labels.iter().map(|&l| l != region::AIR && l != region::CSF).collect())?;
    let tissue_mask = BrainMask::new(shape, labels.iter().map(|&l| l != region::AIR).collect())?;
    let tensor_field = TensorField::from_masked(&tissue_mask, tensors)?;
    Ok(PhantomScene { tensor_field, s0, mask, tissue_mask, labels, spec: spec.clone() })
}

fn brain_voxel(
    x: usize,
    p: [f64; 3],
    spec: &PhantomSpec,
    tract: (f64, f64),
    hi: (f64, f64),
    lo: (f64, f64),
) -> (u8, Tensor6) {
    // straight tract along y, tilting with z
    if (p[0] - 0.05).abs() < 0.14 && p[2].abs() < 0.55 {
        let a = 0.5 * p[2];
        return (region::TRACT_STRAIGHT, cylinder_tensor(tract.0, tract.1, [0.0, a.cos(), a.sin()]));
    }
    // arc in the xy-plane around (−0.7, −0.7)
    let (ax, ay) = (p[0] + 0.7, p[1] + 0.7);
    let r = (ax * ax + ay * ay).sqrt();
    if (r - 0.95).abs() < 0.14 && p[2].abs() < 0.55 {
        let phi = ay.atan2(ax);
        return (region::TRACT_ARC, cylinder_tensor(tract.0, tract.1, [-phi.sin(), phi.cos(), 0.0]));
    }
    // stripes alternate along x, fibres along z
    if (0.28..0.72).contains(&p[0]) && (-0.1..0.6).contains(&p[1]) && p[2].abs() < 0.45 {
        let high = (x / (spec.stripe_period / 2)) % 2 == 0;
        let (label, (ax_, rad)) = if high { (region::STRIPE_HIGH, hi) } else { (region::STRIPE_LOW, lo) };
        return (label, cylinder_tensor(ax_, rad, [0.0, 0.0, 1.0]));
    }
    (region::BACKGROUND, isotropic(spec.background_md))
}

/// One Rician-corrupted magnitude sample `√((s + n₁)² + n₂²)`.
pub fn rician_sample(s: f64, sigma: f64, rng: &mut Rng) -> f64 {
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    ((s + sigma * n1).powi(2) + (sigma * n2).powi(2)).sqrt()
}

/// Noise-free signal of `scene` under `scheme`.
pub fn clean_signal(scene: &PhantomScene, scheme: &GradientScheme) -> Result<Volume4D> {
    synthesize_dwis(&scene.tensor_field, &scene.s0, scheme, &scene.tissue_mask)
}

/// Rician-corrupted acquisition. Volume `j` draws from stream `(seed, j)`,
/// so volumes are independent and individually reproducible.
pub fn simulate_acquisition(scene: &PhantomScene, scheme: &GradientScheme, sigma: f64, seed: u64) -> Result<Volume4D> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("noise sigma {sigma}")));
    }
    let mut vol = clean_signal(scene, scheme)?;
    if sigma == 0.0 {
        return Ok(vol);
    }
    let n = vol.n_voxels();
    vol.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(j, chunk)| {
            let mut rng = stream_rng(seed, j as u64);
            for s in chunk.iter_mut() {
                *s = rician_sample(*s, sigma, &mut rng);
            }
        });
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_model::{dti_metrics, fractional_anisotropy, eigen_sym3};
    use approx::assert_abs_diff_eq;

    #[test]
    fn cylinder_fa_roundtrip() {
        for fa in [0.05, 0.3, 0.8, 0.9] {
            let (a, r) = cylinder_eigenvalues(fa, 0.7);
            assert_abs_diff_eq!(fractional_anisotropy(&[a, r, r]), fa, epsilon = 1e-12);
            assert_abs_diff_eq!((a + 2.0 * r) / 3.0, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn scene_regions() {
        let scene = make_phantom([32, 32, 32], 1, &PhantomSpec::default()).unwrap();
        let counts = scene.region_counts();
        for (l, c) in &counts {
            assert!(*c > 0, "region {} empty", region::name(*l));
        }
        let m = dti_metrics(&scene.tensor_field, &scene.mask).unwrap();
        for v in scene.mask.indices() {
            let e = eigen_sym3(&scene.tensor_field.tensors()[v]);
            assert!(e.values[2] > 0.0, "not SPD");
            match scene.labels[v] {
                region::BACKGROUND => {
                    assert_abs_diff_eq!(m.fa[v], 0.0, epsilon = 1e-12);
                    for l in e.values {
                        assert_abs_diff_eq!(l, 0.8, epsilon = 1e-12);
                    }
                }
                region::TRACT_ARC | region::TRACT_STRAIGHT => {
                    assert!((m.fa[v] - 0.8).abs() < 1e-6, "tract FA {}", m.fa[v])
                }
                _ => {}
            }
        }
        let fa_max = scene.mask.indices().map(|v| m.fa[v]).fold(0.0, f64::max);
        let fa_min = scene.mask.indices().map(|v| m.fa[v]).fold(1.0, f64::min);
        assert!(fa_min <= 0.05 && fa_max >= 0.85, "FA span [{fa_min}, {fa_max}]");
        assert!(scene.mask.indices().all(|v| scene.s0[v] > 0.0));
        // CSF is outside the mask
        assert!(scene.labels.iter().zip(scene.mask.data()).all(|(&l, &m)| !(l == region::CSF && m)));
    }

    #[test]
    fn s0_modulation_bounded() {
        let spec = PhantomSpec::default();
        let scene = make_phantom([16, 20, 24], 9, &spec).unwrap();
        for v in scene.mask.indices() {
            let r = scene.s0[v] / spec.s0;
            assert!((0.8 - 1e-12..=1.2 + 1e-12).contains(&r));
        }
    }

    #[test]
    fn too_small() {
        assert!(make_phantom([15, 32, 32], 0, &PhantomSpec::default()).is_err());
    }
}
