//! Diffusion tensor fitting, DWI synthesis, and scalar DTI metrics.
//!
//! Tensors are stored as `[Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]` in μm²/ms, matching
//! the column order of [`crate::gradient_design::design_row`].

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradient_design::{design_matrix, matrix_condition};
use crate::volume::{BrainMask, GradientScheme, Volume4D};

/// Signal floor for the log, as a fraction of S0.
pub const SIGNAL_FLOOR: f64 = 1e-6;

pub type Tensor6 = [f64; 6];

/// Per-voxel fit flags.
pub mod flags {
    pub const OUTSIDE_MASK: u8 = 1;
    pub const CLAMPED_SIGNAL: u8 = 2;
    pub const NEGATIVE_EIGENVALUE: u8 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    dims: [usize; 3],
    tensors: Vec<Tensor6>,
    flags: Vec<u8>,
}

impl TensorField {
    pub fn new(dims: [usize; 3], tensors: Vec<Tensor6>, flags: Vec<u8>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if tensors.len() != n || flags.len() != n {
            return Err(Error::Shape(format!(
                "tensor field {dims:?} needs {n} tensors and flags, got {} and {}",
                tensors.len(),
                flags.len()
            )));
        }
        Ok(Self { dims, tensors, flags })
    }

    /// Field with `tensors` inside `mask` and zero elsewhere.
    pub fn from_masked(mask: &BrainMask, tensors: Vec<Tensor6>) -> Result<Self> {
        let flags = mask.data().iter().map(|&m| if m { 0 } else { flags::OUTSIDE_MASK }).collect();
        let tensors = tensors
            .into_iter()
            .zip(mask.data())
            .map(|(t, &m)| if m { t } else { [0.0; 6] })
            .collect();
        Self::new(mask.dims(), tensors, flags)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn tensors(&self) -> &[Tensor6] {
        &self.tensors
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn has_flag(&self, voxel: usize, flag: u8) -> bool {
        self.flags[voxel] & flag != 0
    }

    /// Six-volume 4D image in element order.
    pub fn to_volume(&self) -> Volume4D {
        let n = self.tensors.len();
        let mut data = vec![0.0; 6 * n];
        for (v, t) in self.tensors.iter().enumerate() {
            for c in 0..6 {
                data[c * n + v] = t[c];
            }
        }
        let [nx, ny, nz] = self.dims;
        Volume4D::new([nx, ny, nz, 6], data).expect("finite tensors")
    }

    pub fn from_volume(vol: &Volume4D) -> Result<Self> {
        if vol.n_volumes() != 6 {
            return Err(Error::Shape(format!("tensor image needs 6 volumes, got {}", vol.n_volumes())));
        }
        let n = vol.n_voxels();
        let tensors: Vec<Tensor6> = (0..n).map(|v| std::array::from_fn(|c| vol.volume(c)[v])).collect();
        let flags = tensors
            .iter()
            .map(|t| if t.iter().all(|&x| x == 0.0) { flags::OUTSIDE_MASK } else { 0 })
            .collect();
        Self::new(vol.spatial_dims(), tensors, flags)
    }
}

/// Apparent diffusion coefficient `−ln(S/S0)/b`; the signal is floored at
/// `1e-6·S0` and the returned flag reports whether the floor was hit.
pub fn adc(s: f64, s0: f64, b: f64) -> Result<(f64, bool)> {
    if !(s0 > 0.0) {
        return Err(Error::InvalidSignal(format!("S0 = {s0}")));
    }
    if !(b > 0.0) {
        return Err(Error::InvalidSignal(format!("b = {b}")));
    }
    let floor = SIGNAL_FLOOR * s0;
    let clamped = s < floor;
    let s = if clamped { floor } else { s };
    Ok((-(s / s0).ln() / b, clamped))
}

/// Where the non-diffusion-weighted signal comes from in [`fit_tensor`].
#[derive(Debug, Clone, Copy)]
pub enum S0Source<'a> {
    /// Voxelwise mean over the b=0 volumes of the input.
    MeanOfB0,
    /// An explicit 3D S0 map.
    Provided(&'a [f64]),
}

/// Mean of the b=0 volumes.
pub fn mean_b0(vol: &Volume4D, scheme: &GradientScheme) -> Result<Vec<f64>> {
    let b0 = scheme.b0_indices();
    if b0.is_empty() {
        return Err(Error::InvalidScheme("no b=0 volumes".into()));
    }
    let mut out = vec![0.0; vol.n_voxels()];
    for &i in &b0 {
        for (o, &x) in out.iter_mut().zip(vol.volume(i)) {
            *o += x;
        }
    }
    let k = b0.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// Linear map from ADCs to tensor elements: `A⁻¹` for six directions,
/// the pseudo-inverse otherwise.
pub fn fit_operator(dirs: &[[f64; 3]]) -> Result<DMatrix<f64>> {
    let a = design_matrix(dirs)?;
    if a.nrows() < 6 {
        return Err(Error::SingularScheme(format!("{} directions cannot span 6 tensor elements", a.nrows())));
    }
    matrix_condition(&a)?;
    if a.nrows() == 6 {
        a.try_inverse().ok_or_else(|| Error::SingularScheme("design matrix not invertible".into()))
    } else {
        a.pseudo_inverse(0.0).map_err(|e| Error::SingularScheme(e.to_string()))
    }
}

/// Voxelwise tensor fit over the non-b0 volumes of `vol`.
pub fn fit_tensor(vol: &Volume4D, scheme: &GradientScheme, mask: &BrainMask, s0: S0Source) -> Result<TensorField> {
    if scheme.n_volumes() != vol.n_volumes() {
        return Err(Error::Shape(format!(
            "scheme has {} volumes, image has {}",
            scheme.n_volumes(),
            vol.n_volumes()
        )));
    }
    mask.check_matches(vol.spatial_dims())?;
    let dwi = scheme.dwi_indices();
    let dirs: Vec<[f64; 3]> = dwi.iter().map(|&i| scheme.bvecs()[i]).collect();
    let op = fit_operator(&dirs)?;
    let s0_map = match s0 {
        S0Source::MeanOfB0 => mean_b0(vol, scheme)?,
        S0Source::Provided(m) => {
            if m.len() != vol.n_voxels() {
                return Err(Error::Shape(format!("S0 map has {} voxels, image has {}", m.len(), vol.n_voxels())));
            }
            m.to_vec()
        }
    };
    let bvals: Vec<f64> = dwi.iter().map(|&i| scheme.bvals()[i]).collect();
    let n = vol.n_voxels();

    let fitted: Vec<(Tensor6, u8)> = (0..n)
        .into_par_iter()
        .map(|v| {
            if !mask.data()[v] {
                return Ok(([0.0; 6], flags::OUTSIDE_MASK));
            }
            let s0 = s0_map[v];
            if !(s0 > 0.0) {
                // no usable reference signal; leave the tensor empty
                return Ok(([0.0; 6], flags::CLAMPED_SIGNAL));
            }
            let mut flag = 0;
            let mut c = vec![0.0; dwi.len()];
            for (j, &vi) in dwi.iter().enumerate() {
                let (val, clamped) = adc(vol.volume(vi)[v], s0, bvals[j])?;
                c[j] = val;
                if clamped {
                    flag |= flags::CLAMPED_SIGNAL;
                }
            }
            let mut d = [0.0; 6];
            for (r, out) in d.iter_mut().enumerate() {
                *out = (0..c.len()).map(|j| op[(r, j)] * c[j]).sum();
            }
            if eigen_sym3(&d).values[2] < 0.0 {
                flag |= flags::NEGATIVE_EIGENVALUE;
            }
            Ok((d, flag))
        })
        .collect::<Result<_>>()?;
    let (tensors, flags) = fitted.into_iter().unzip();
    TensorField::new(vol.spatial_dims(), tensors, flags)
}

/// Signal `S0·exp(−b·αᵀD)` for every volume of `target` inside `mask`.
pub fn synthesize_dwis(tf: &TensorField, s0: &[f64], target: &GradientScheme, mask: &BrainMask) -> Result<Volume4D> {
    mask.check_matches(tf.dims())?;
    let n = tf.tensors().len();
    if s0.len() != n {
        return Err(Error::Shape(format!("S0 map has {} voxels, tensor field {n}", s0.len())));
    }
    if target.n_volumes() == 0 {
        return Err(Error::InvalidScheme("empty target scheme".into()));
    }
    let [nx, ny, nz] = tf.dims();
    let mut out = Volume4D::zeros([nx, ny, nz, target.n_volumes()]);
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(j, vol)| {
            let row = crate::gradient_design::design_row(&target.bvecs()[j]);
            let b = target.bvals()[j];
            let b0 = target.is_b0()[j];
            for (v, o) in vol.iter_mut().enumerate() {
                if !mask.data()[v] {
                    continue;
                }
                *o = if b0 {
                    s0[v]
                } else {
                    let d = &tf.tensors()[v];
                    let proj: f64 = row.iter().zip(d).map(|(a, x)| a * x).sum();
                    s0[v] * (-b * proj).exp()
                };
            }
        });
    out.with_scheme(target.clone())
}

/// Eigen-decomposition of a symmetric 3×3 tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigen3 {
    /// Sorted descending.
    pub values: [f64; 3],
    /// `vectors[i]` pairs with `values[i]`.
    pub vectors: [[f64; 3]; 3],
}

pub fn tensor_to_matrix(d: &Tensor6) -> [[f64; 3]; 3] {
    [[d[0], d[3], d[4]], [d[3], d[1], d[5]], [d[4], d[5], d[2]]]
}

/// `Σ λᵢ eᵢeᵢᵀ` packed in tensor element order.
pub fn tensor_from_eigen(values: [f64; 3], vectors: [[f64; 3]; 3]) -> Tensor6 {
    let mut m = [[0.0; 3]; 3];
    for (l, e) in values.iter().zip(&vectors) {
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += l * e[r] * e[c];
            }
        }
    }
    [m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2]]
}

/// Cyclic Jacobi eigen-solver.
///
/// Rotations sweep until the off-diagonal norm falls below `1e-14·‖D‖_F`.
/// Each eigenvector is flipped so its largest-magnitude component is
/// positive (first one on ties).
pub fn eigen_sym3(d: &Tensor6) -> Eigen3 {
    let mut a = tensor_to_matrix(d);
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let frob = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob;
    for _sweep in 0..64 {
        let off = (2.0 * (a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2))).sqrt();
        if off <= tol || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← JᵀAJ
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            // V ← VJ (columns are eigenvectors)
            for row in &mut v {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| {
        let mut e = [v[0][i], v[1][i], v[2][i]];
        let mut k = 0;
        for j in 1..3 {
            if e[j].abs() > e[k].abs() {
                k = j;
            }
        }
        if e[k] < 0.0 {
            e.iter_mut().for_each(|x| *x = -*x);
        }
        e
    });
    Eigen3 { values, vectors }
}

/// `√(3/2)·‖λ − MD‖ / ‖λ‖`, zero when ‖λ‖ < 1e-12. Not clipped.
pub fn fractional_anisotropy(l: &[f64; 3]) -> f64 {
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    if norm < 1e-12 {
        return 0.0;
    }
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let dev = ((l[0] - md).powi(2) + (l[1] - md).powi(2) + (l[2] - md).powi(2)).sqrt();
    (1.5f64).sqrt() * dev / norm
}

/// Scalar and orientation maps derived from a tensor field.
#[derive(Debug, Clone, PartialEq)]
pub struct DtiMetrics {
    pub dims: [usize; 3],
    pub v1: Vec<[f64; 3]>,
    /// Clipped to [0, 1].
    pub fa: Vec<f64>,
    pub md: Vec<f64>,
    pub ad: Vec<f64>,
    pub rd: Vec<f64>,
    pub eigenvalues: Vec<[f64; 3]>,
    pub negative_eigenvalue: Vec<bool>,
}

impl DtiMetrics {
    fn map(&self, v: &[f64]) -> Volume4D {
        let [nx, ny, nz] = self.dims;
        Volume4D::new([nx, ny, nz, 1], v.to_vec()).expect("finite metric map")
    }

    pub fn fa_volume(&self) -> Volume4D {
        self.map(&self.fa)
    }
    pub fn md_volume(&self) -> Volume4D {
        self.map(&self.md)
    }
    pub fn ad_volume(&self) -> Volume4D {
        self.map(&self.ad)
    }
    pub fn rd_volume(&self) -> Volume4D {
        self.map(&self.rd)
    }

    /// Primary eigenvector as a 3-volume image (x, y, z components).
    pub fn v1_volume(&self) -> Volume4D {
        let [nx, ny, nz] = self.dims;
        let data = (0..3).flat_map(|c| self.v1.iter().map(move |v| v[c])).collect();
        Volume4D::new([nx, ny, nz, 3], data).expect("finite vectors")
    }
}

/// Eigen-derived maps for every voxel in `mask`; voxels outside are zero.
pub fn dti_metrics(tf: &TensorField, mask: &BrainMask) -> Result<DtiMetrics> {
    mask.check_matches(tf.dims())?;
    let n = tf.tensors().len();
    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|v| {
            if !mask.data()[v] {
                return ([0.0; 3], 0.0, 0.0, 0.0, 0.0, [0.0; 3], false);
            }
            let e = eigen_sym3(&tf.tensors()[v]);
            let l = e.values;
            let md = (l[0] + l[1] + l[2]) / 3.0;
            let fa = fractional_anisotropy(&l).clamp(0.0, 1.0);
            (e.vectors[0], fa, md, l[0], (l[1] + l[2]) / 2.0, l, l[2] < 0.0)
        })
        .collect();
    let mut m = DtiMetrics {
        dims: tf.dims(),
        v1: Vec::with_capacity(n),
        fa: Vec::with_capacity(n),
        md: Vec::with_capacity(n),
        ad: Vec::with_capacity(n),
        rd: Vec::with_capacity(n),
        eigenvalues: Vec::with_capacity(n),
        negative_eigenvalue: Vec::with_capacity(n),
    };
    for (v1, fa, md, ad, rd, l, neg) in per {
        m.v1.push(v1);
        m.fa.push(fa);
        m.md.push(md);
        m.ad.push(ad);
        m.rd.push(rd);
        m.eigenvalues.push(l);
        m.negative_eigenvalue.push(neg);
    }
    Ok(m)
}
