use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type for network math (`f32` for training and
/// inference, `f64` for gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense `[batch, channel, z, y, x]` array, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("tensor shape {shape:?} vs {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// `[nz, ny, nx]`
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// One `(batch, channel)` volume.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let off = (n * self.shape[1] + c) * v;
        &self.data[off..off + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let off = (n * self.shape[1] + c) * v;
        &mut self.data[off..off + v]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 { shape: self.shape, data: self.data.iter().map(|&x| U::of(x.f64())).collect() }
    }

    /// Channel-wise concatenation `[a; b]`.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.shape[0] != b.shape[0] || a.spatial() != b.spatial() {
            return Err(Error::Shape(format!("cannot concatenate {:?} and {:?}", a.shape, b.shape)));
        }
        let [n, ca, z, y, x] = a.shape;
        let cb = b.shape[1];
        let mut out = Self::zeros([n, ca + cb, z, y, x]);
        let v = a.voxels();
        for i in 0..n {
            out.data[(i * (ca + cb)) * v..(i * (ca + cb) + ca) * v].copy_from_slice(&a.data[i * ca * v..(i + 1) * ca * v]);
            out.data[(i * (ca + cb) + ca) * v..(i + 1) * (ca + cb) * v]
                .copy_from_slice(&b.data[i * cb * v..(i + 1) * cb * v]);
        }
        Ok(out)
    }

    /// Inverse of [`Tensor5::concat_channels`]: the first `ca` channels and the rest.
    pub fn split_channels(&self, ca: usize) -> (Self, Self) {
        let [n, c, z, y, x] = self.shape;
        let cb = c - ca;
        let v = self.voxels();
        let mut a = Self::zeros([n, ca, z, y, x]);
        let mut b = Self::zeros([n, cb, z, y, x]);
        for i in 0..n {
            a.data[i * ca * v..(i + 1) * ca * v].copy_from_slice(&self.data[i * c * v..(i * c + ca) * v]);
            b.data[i * cb * v..(i + 1) * cb * v].copy_from_slice(&self.data[(i * c + ca) * v..(i + 1) * c * v]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
