//! Per-channel batch normalisation over `(batch × spatial)`.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor5};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor5<T>,
    pub inv_std: Vec<T>,
}

pub struct BnGrads<T> {
    pub dx: Tensor5<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training mode: batch statistics (biased variance), running stats updated.
    pub fn forward_train(&mut self, x: &Tensor5<T>) -> (Tensor5<T>, BnCache<T>) {
        let c = x.channels();
        let n = x.batch();
        let count = T::of((n * x.voxels()) as f64);
        let eps = T::of(BN_EPSILON);
        let stats: Vec<(T, T)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let mut sum = T::zero();
                for b in 0..n {
                    sum += x.channel(b, ch).iter().fold(T::zero(), |a, &v| a + v);
                }
                let mean = sum / count;
                let mut ss = T::zero();
                for b in 0..n {
                    ss += x.channel(b, ch).iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
                }
                (mean, ss / count)
            })
            .collect();
        let inv_std: Vec<T> = stats.iter().map(|&(_, var)| T::one() / (var + eps).sqrt()).collect();
        let mut xhat = Tensor5::zeros(x.shape());
        let mut y = Tensor5::zeros(x.shape());
        let vox = x.voxels();
        xhat.data_mut()
            .par_chunks_mut(vox)
            .zip(y.data_mut().par_chunks_mut(vox))
            .enumerate()
            .for_each(|(job, (h, out))| {
                let (b, ch) = (job / c, job % c);
                let (mean, _) = stats[ch];
                for ((h, o), &v) in h.iter_mut().zip(out.iter_mut()).zip(x.channel(b, ch)) {
                    *h = (v - mean) * inv_std[ch];
                    *o = self.gamma[ch] * *h + self.beta[ch];
                }
            });
        let m = T::of(BN_MOMENTUM);
        for (ch, &(mean, var)) in stats.iter().enumerate() {
            self.running_mean[ch] = m * self.running_mean[ch] + (T::one() - m) * mean;
            self.running_var[ch] = m * self.running_var[ch] + (T::one() - m) * var;
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Inference mode: running statistics, no state change.
    pub fn forward_inference(&self, x: &Tensor5<T>) -> Tensor5<T> {
        let c = x.channels();
        let eps = T::of(BN_EPSILON);
        let scale: Vec<T> = (0..c).map(|ch| self.gamma[ch] / (self.running_var[ch] + eps).sqrt()).collect();
        let shift: Vec<T> = (0..c).map(|ch| self.beta[ch] - scale[ch] * self.running_mean[ch]).collect();
        let mut y = x.clone();
        let vox = x.voxels();
        y.data_mut().par_chunks_mut(vox).enumerate().for_each(|(job, out)| {
            let ch = job % c;
            for v in out {
                *v = scale[ch] * *v + shift[ch];
            }
        });
        y
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor5<T>) -> BnGrads<T> {
        let c = dy.channels();
        let n = dy.batch();
        let count = T::of((n * dy.voxels()) as f64);
        let sums: Vec<(T, T)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let (mut db, mut dg) = (T::zero(), T::zero());
                for b in 0..n {
                    for (&g, &h) in dy.channel(b, ch).iter().zip(cache.xhat.channel(b, ch)) {
                        db += g;
                        dg += g * h;
                    }
                }
                (dg, db)
            })
            .collect();
        let mut dx = Tensor5::zeros(dy.shape());
        let vox = dy.voxels();
        dx.data_mut().par_chunks_mut(vox).enumerate().for_each(|(job, out)| {
            let (b, ch) = (job / c, job % c);
            let (dg, db) = sums[ch];
            let k = self.gamma[ch] * cache.inv_std[ch] / count;
            for ((o, &g), &h) in out.iter_mut().zip(dy.channel(b, ch)).zip(cache.xhat.channel(b, ch)) {
                *o = k * (count * g - db - h * dg);
            }
        });
        BnGrads { dx, dgamma: sums.iter().map(|s| s.0).collect(), dbeta: sums.iter().map(|s| s.1).collect() }
    }
}
