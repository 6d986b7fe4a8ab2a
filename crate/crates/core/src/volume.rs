//! In-memory image, mask, and gradient-table types.
//!
//! Voxel data is stored with x varying fastest, then y, z, and volume index,
//! which is the on-disk NIfTI order.

use crate::error::{Error, Result};

/// Default b-value (ms/μm²) at or below which a volume counts as b=0.
pub const DEFAULT_B0_THRESHOLD: f64 = 0.05;

/// Per-volume b-values (ms/μm²) and unit encoding directions.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
    is_b0: Vec<bool>,
}

impl GradientScheme {
    /// Builds a scheme, renormalising every nonzero vector to unit length.
    ///
    /// A diffusion-weighted volume with a zero vector is rejected.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>, b0_threshold: f64) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::Format(format!(
                "{} b-values but {} vectors",
                bvals.len(),
                bvecs.len()
            )));
        }
        let mut out_vecs = Vec::with_capacity(bvecs.len());
        let mut is_b0 = Vec::with_capacity(bvals.len());
        for (i, (&b, v)) in bvals.iter().zip(&bvecs).enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::InvalidScheme(format!("volume {i}: b-value {b}")));
            }
            let b0 = b <= b0_threshold;
            let n = norm3(v);
            if !n.is_finite() {
                return Err(Error::InvalidScheme(format!("volume {i}: non-finite vector")));
            }
            let unit = if n > 0.0 {
                [v[0] / n, v[1] / n, v[2] / n]
            } else if b0 {
                [0.0; 3]
            } else {
                return Err(Error::InvalidScheme(format!(
                    "volume {i} has b = {b} but a zero direction"
                )));
            };
            out_vecs.push(unit);
            is_b0.push(b0);
        }
        Ok(Self { bvals, bvecs: out_vecs, is_b0 })
    }

    /// `n_b0` b=0 volumes followed by one volume per direction at `bval`.
    pub fn from_directions(n_b0: usize, dirs: &[[f64; 3]], bval: f64) -> Result<Self> {
        let mut bvals = vec![0.0; n_b0];
        let mut bvecs = vec![[0.0; 3]; n_b0];
        bvals.extend(std::iter::repeat_n(bval, dirs.len()));
        bvecs.extend_from_slice(dirs);
        Self::new(bvals, bvecs, DEFAULT_B0_THRESHOLD)
    }

    pub fn n_volumes(&self) -> usize {
        self.bvals.len()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn is_b0(&self) -> &[bool] {
        &self.is_b0
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.n_volumes()).filter(|&i| self.is_b0[i]).collect()
    }

    pub fn dwi_indices(&self) -> Vec<usize> {
        (0..self.n_volumes()).filter(|&i| !self.is_b0[i]).collect()
    }

    /// Scheme restricted to the listed volumes, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self { bvals: vec![], bvecs: vec![], is_b0: vec![] };
        for &i in indices {
            if i >= self.n_volumes() {
                return Err(Error::InvalidInput(format!(
                    "volume index {i} out of range for {} volumes",
                    self.n_volumes()
                )));
            }
            out.bvals.push(self.bvals[i]);
            out.bvecs.push(self.bvecs[i]);
            out.is_b0.push(self.is_b0[i]);
        }
        Ok(out)
    }

    /// Checks the minimum content needed for a tensor fit.
    pub fn check_fittable(&self) -> Result<()> {
        let n_b0 = self.is_b0.iter().filter(|&&b| b).count();
        let n_dwi = self.n_volumes() - n_b0;
        if n_b0 == 0 || n_dwi < 6 {
            return Err(Error::InvalidScheme(format!(
                "tensor fitting needs >= 1 b0 and >= 6 DWIs, got {n_b0} and {n_dwi}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// An `nx × ny × nz × nv` stack of float64 volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: [usize; 4],
    data: Vec<f64>,
    voxel_size: [f64; 3],
    scheme: Option<GradientScheme>,
}

impl Volume4D {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { dims, data, voxel_size: [1.0; 3], scheme: None })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
            voxel_size: [1.0; 3],
            scheme: None,
        }
    }

    /// Stacks equally sized 3D volumes.
    pub fn from_volumes(dims3: [usize; 3], volumes: &[&[f64]]) -> Result<Self> {
        let n = dims3.iter().product::<usize>();
        let mut data = Vec::with_capacity(n * volumes.len());
        for (i, v) in volumes.iter().enumerate() {
            if v.len() != n {
                return Err(Error::Shape(format!("volume {i} has {} voxels, expected {n}", v.len())));
            }
            data.extend_from_slice(v);
        }
        Self::new([dims3[0], dims3[1], dims3[2], volumes.len()], data)
    }

    pub fn with_scheme(mut self, scheme: GradientScheme) -> Result<Self> {
        if scheme.n_volumes() != self.dims[3] {
            return Err(Error::Shape(format!(
                "scheme has {} volumes, image has {}",
                scheme.n_volumes(),
                self.dims[3]
            )));
        }
        self.scheme = Some(scheme);
        Ok(self)
    }

    pub fn with_voxel_size(mut self, voxel_size: [f64; 3]) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn n_volumes(&self) -> usize {
        self.dims[3]
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn scheme(&self) -> Option<&GradientScheme> {
        self.scheme.as_ref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn volume(&self, v: usize) -> &[f64] {
        let n = self.n_voxels();
        &self.data[v * n..(v + 1) * n]
    }

    pub fn volume_mut(&mut self, v: usize) -> &mut [f64] {
        let n = self.n_voxels();
        &mut self.data[v * n..(v + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, z: usize, v: usize) -> f64 {
        let [nx, ny, nz, _] = self.dims;
        self.data[((v * nz + z) * ny + y) * nx + x]
    }

    /// New volume made of the listed volumes; the scheme follows if present.
    pub fn select_volumes(&self, indices: &[usize]) -> Result<Self> {
        let vols: Vec<&[f64]> = indices
            .iter()
            .map(|&i| {
                if i < self.n_volumes() {
                    Ok(self.volume(i))
                } else {
                    Err(Error::InvalidInput(format!("volume index {i} out of range")))
                }
            })
            .collect::<Result<_>>()?;
        let mut out = Self::from_volumes(self.spatial_dims(), &vols)?.with_voxel_size(self.voxel_size);
        if let Some(s) = &self.scheme {
            out.scheme = Some(s.select(indices)?);
        }
        Ok(out)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::InvalidInput(format!("non-finite value at flat index {i}"))),
            None => Ok(()),
        }
    }
}

/// Binary brain mask over an `nx × ny × nz` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrainMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl BrainMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask dims {dims:?} vs {} values", data.len())));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::DegenerateInput("mask has no voxels set".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![true; dims.iter().product()] }
    }

    /// Mask of all voxels where `v` is nonzero in the first volume.
    pub fn from_volume(vol: &Volume4D) -> Result<Self> {
        Self::new(vol.spatial_dims(), vol.volume(0).iter().map(|&x| x != 0.0).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn check_matches(&self, dims3: [usize; 3]) -> Result<()> {
        if self.dims != dims3 {
            return Err(Error::Shape(format!("mask dims {:?} vs image dims {dims3:?}", self.dims)));
        }
        Ok(())
    }

    pub fn to_volume(&self) -> Volume4D {
        let [nx, ny, nz] = self.dims;
        Volume4D {
            dims: [nx, ny, nz, 1],
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            voxel_size: [1.0; 3],
            scheme: None,
        }
    }
}
