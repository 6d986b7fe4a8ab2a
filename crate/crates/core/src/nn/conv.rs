//! 3D cross-correlation, stride 1, zero "same" padding of `(d-1)/2`.
//!
//! Weights are laid out `[out][in][kz][ky][kx]`. Every parallel job owns a
//! disjoint slice of its output and accumulates in a fixed order, so results
//! do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub d: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.d * self.d * self.d
    }
}

pub struct ConvGrads<T> {
    pub dx: Tensor5<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

fn check(x: &Tensor5<impl Scalar>, w_len: usize, b_len: usize, s: ConvShape) -> Result<()> {
    if s.d % 2 == 0 {
        return Err(Error::Shape(format!("kernel extent {} must be odd", s.d)));
    }
    if x.channels() != s.in_c || w_len != s.weight_len() || b_len != s.out_c {
        return Err(Error::Shape(format!(
            "conv {}->{} d={}: input has {} channels, {} weights, {} biases",
            s.in_c,
            s.out_c,
            s.d,
            x.channels(),
            w_len,
            b_len
        )));
    }
    Ok(())
}

/// Zero-padded layout: each channel is stored in a `(nz+2p)(ny+2p)(nx+2p)`
/// box so a kernel tap becomes one constant offset over a contiguous range.
/// Positions in the padding ring of an output buffer are scratch.
struct Padded {
    dims: [usize; 3],
    pdims: [usize; 3],
    p: usize,
}

impl Padded {
    fn new(dims: [usize; 3], p: usize) -> Self {
        Self { dims, pdims: dims.map(|d| d + 2 * p), p }
    }

    fn len(&self) -> usize {
        self.pdims.iter().product()
    }

    /// Flat offset of the kernel origin relative to a voxel, i.e. of the centre tap.
    fn centre(&self) -> usize {
        (self.p * self.pdims[1] + self.p) * self.pdims[2] + self.p
    }

    fn tap(&self, k: [usize; 3]) -> usize {
        (k[0] * self.pdims[1] + k[1]) * self.pdims[2] + k[2]
    }

    fn pad_into<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        let [nz, ny, nx] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                let s = (z * ny + y) * nx;
                let d = ((z + self.p) * self.pdims[1] + y + self.p) * self.pdims[2] + self.p;
                dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
            }
        }
    }

    fn pad<T: Scalar>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.len()];
        self.pad_into(src, &mut out);
        out
    }

    fn unpad_into<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        let [nz, ny, nx] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                let d = (z * ny + y) * nx;
                let s = ((z + self.p) * self.pdims[1] + y + self.p) * self.pdims[2] + self.p;
                dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
            }
        }
    }

    /// Pads every `(batch, channel)` volume of `x`.
    fn pad_all<T: Scalar>(&self, x: &Tensor5<T>) -> Vec<Vec<T>> {
        let [n, c, ..] = x.shape();
        (0..n * c).into_par_iter().map(|j| self.pad(x.channel(j / c, j % c))).collect()
    }
}

/// `out[q] += w * src[q + shift]` for interior-range `q`.
#[inline]
fn axpy<T: Scalar>(out: &mut [T], src: &[T], w: T, lo: usize, hi: usize, src_lo: usize) {
    for (a, &b) in out[lo..hi].iter_mut().zip(&src[src_lo..src_lo + hi - lo]) {
        *a += w * b;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // eight partial sums so the loop vectorises
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn kernel_offsets(d: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..d).flat_map(move |kz| (0..d).flat_map(move |ky| (0..d).map(move |kx| [kz, ky, kx])))
}

pub fn conv3d_forward<T: Scalar>(x: &Tensor5<T>, w: &[T], b: &[T], s: ConvShape) -> Result<Tensor5<T>> {
    check(x, w.len(), b.len(), s)?;
    let [n, _, nz, ny, nx] = x.shape();
    let vox = x.voxels();
    let pad = Padded::new([nz, ny, nx], (s.d - 1) / 2);
    let (c0, len) = (pad.centre(), pad.len());
    let (lo, hi) = (c0, len - c0);
    let taps: Vec<usize> = kernel_offsets(s.d).map(|k| pad.tap(k)).collect();
    let xp = pad.pad_all(x);
    let k3 = taps.len();
    let mut y = Tensor5::zeros([n, s.out_c, nz, ny, nx]);
    y.data_mut().par_chunks_mut(vox).enumerate().for_each(|(job, out)| {
        let (bi, o) = (job / s.out_c, job % s.out_c);
        let mut acc = vec![b[o]; len];
        for i in 0..s.in_c {
            let src = &xp[bi * s.in_c + i];
            let wk = &w[(o * s.in_c + i) * k3..(o * s.in_c + i + 1) * k3];
            for (&tap, &wv) in taps.iter().zip(wk) {
                if wv != T::zero() {
                    axpy(&mut acc, src, wv, lo, hi, lo + tap - c0);
                }
            }
        }
        pad.unpad_into(&acc, out);
    });
    Ok(y)
}

/// Gradients of a scalar loss with respect to input, weights and bias, given
/// the upstream gradient `dy`.
pub fn conv3d_backward<T: Scalar>(x: &Tensor5<T>, w: &[T], dy: &Tensor5<T>, s: ConvShape) -> Result<ConvGrads<T>> {
    check(x, w.len(), s.out_c, s)?;
    if dy.shape() != [x.batch(), s.out_c, x.spatial()[0], x.spatial()[1], x.spatial()[2]] {
        return Err(Error::Shape(format!("dy shape {:?} does not match conv output", dy.shape())));
    }
    let n = x.batch();
    let vox = x.voxels();
    let pad = Padded::new(x.spatial(), (s.d - 1) / 2);
    let (c0, len) = (pad.centre(), pad.len());
    let (lo, hi) = (c0, len - c0);
    let taps: Vec<usize> = kernel_offsets(s.d).map(|k| pad.tap(k)).collect();
    let k3 = taps.len();
    let xp = pad.pad_all(x);
    // dy in the padded layout is zero on the ring, so dot products over the
    // interior range only see real output positions.
    let dyp = pad.pad_all(dy);

    let db: Vec<T> = (0..s.out_c)
        .into_par_iter()
        .map(|o| {
            let mut acc = T::zero();
            for bi in 0..n {
                acc += dy.channel(bi, o).iter().fold(T::zero(), |a, &v| a + v);
            }
            acc
        })
        .collect();

    let mut dw = vec![T::zero(); s.weight_len()];
    dw.par_chunks_mut(s.in_c * k3).enumerate().for_each(|(o, dwo)| {
        for i in 0..s.in_c {
            for (kk, &tap) in taps.iter().enumerate() {
                let mut acc = T::zero();
                for bi in 0..n {
                    let g = &dyp[bi * s.out_c + o][lo..hi];
                    let src = &xp[bi * s.in_c + i][lo + tap - c0..hi + tap - c0];
                    acc += dot(g, src);
                }
                dwo[i * k3 + kk] = acc;
            }
        }
    });

    // dx[q] = Σ_o Σ_k w[o,i,k] · dy[q - (tap_k - c0)]
    let mut dx = Tensor5::zeros(x.shape());
    dx.data_mut().par_chunks_mut(vox).enumerate().for_each(|(job, out)| {
        let (bi, i) = (job / s.in_c, job % s.in_c);
        let mut acc = vec![T::zero(); len];
        for o in 0..s.out_c {
            let src = &dyp[bi * s.out_c + o];
            let wk = &w[(o * s.in_c + i) * k3..(o * s.in_c + i + 1) * k3];
            for (&tap, &wv) in taps.iter().zip(wk) {
                if wv != T::zero() {
                    axpy(&mut acc, src, wv, lo, hi, lo + c0 - tap);
                }
            }
        }
        pad.unpad_into(&acc, out);
    });
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor5::from_vec([1, 1, 3, 4, 5], (0..60).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap();
        let mut w = vec![0.0f32; 27];
        w[13] = 1.0;
        let y = conv3d_forward(&x, &w, &[0.0], ConvShape { in_c: 1, out_c: 1, d: 3 }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor5::from_vec([1, 1, 4, 4, 4], vec![1.0f64; 64]).unwrap();
        let y = conv3d_forward(&x, &[1.0; 27], &[0.0], ConvShape { in_c: 1, out_c: 1, d: 3 }).unwrap();
        assert_eq!(y.data()[(16 + 4) + 1], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor5::<f32>::zeros([1, 2, 3, 3, 3]);
        let s = ConvShape { in_c: 3, out_c: 1, d: 3 };
        assert!(matches!(conv3d_forward(&x, &[0.0; 81], &[0.0], s), Err(Error::Shape(_))));
        let s = ConvShape { in_c: 2, out_c: 1, d: 2 };
        assert!(matches!(conv3d_forward(&x, &[0.0; 16], &[0.0], s), Err(Error::Shape(_))));
    }
}
