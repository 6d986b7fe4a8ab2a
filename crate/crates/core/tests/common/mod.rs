#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdndti::nn::{Scalar, Tensor5};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor5<T> {
    let n = shape.iter().product();
    Tensor5::from_vec(shape, (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

/// Direct seven-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor5<f64>, w: &[f64], b: &[f64], out_c: usize, d: usize) -> Tensor5<f64> {
    let [n, in_c, nz, ny, nx] = x.shape();
    let p = (d as isize - 1) / 2;
    let mut y = Tensor5::zeros([n, out_c, nz, ny, nx]);
    for bi in 0..n {
        for o in 0..out_c {
            for z in 0..nz {
                for yy in 0..ny {
                    for xx in 0..nx {
                        let mut acc = b[o];
                        for i in 0..in_c {
                            for kz in 0..d {
                                for ky in 0..d {
                                    for kx in 0..d {
                                        let sz = z as isize + kz as isize - p;
                                        let sy = yy as isize + ky as isize - p;
                                        let sx = xx as isize + kx as isize - p;
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= nz as isize || sy >= ny as isize || sx >= nx as isize {
                                            continue;
                                        }
                                        let wv = w[(((o * in_c + i) * d + kz) * d + ky) * d + kx];
                                        acc += wv * x.channel(bi, i)[((sz as usize) * ny + sy as usize) * nx + sx as usize];
                                    }
                                }
                            }
                        }
                        y.channel_mut(bi, o)[(z * ny + yy) * nx + xx] = acc;
                    }
                }
            }
        }
    }
    y
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn numeric_grad(x: &[f64], coords: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error between analytic and numeric gradient samples.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Up to `k` distinct coordinates of `0..n`, evenly spread with a random offset.
pub fn sample_coords(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let off = rng.random_range(0..n);
    let mut v: Vec<usize> = (0..k).map(|j| (off + j * n / k) % n).collect();
    v.sort();
    v.dedup();
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adam written as a plain scalar recurrence, minimising θ².
pub fn adam_reference(theta0: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        th -= lr * mh / (vh.sqrt() + eps);
        out.push(th);
    }
    out
}

/// Values printed by an independent Python script running the same
/// recurrence from θ=1: (lr, step, θ).
pub const ADAM_PYTHON: [(f64, usize, f64); 8] = [
    (1e-3, 1, 0.999000000005),
    (1e-3, 10, 0.9900032473478027),
    (1e-3, 50, 0.9503057019314531),
    (1e-3, 100, 0.901743598078609),
    (0.1, 1, 0.9000000005),
    (0.1, 10, 0.07624915560691221),
    (0.1, 50, -0.004818223222661105),
    (0.1, 100, 0.002936675681102549),
];

pub mod fd {
    use super::*;
    use sdndti::nn::batchnorm::BatchNorm;
    use sdndti::nn::{conv3d_backward, conv3d_forward, l1_loss_masked, ConvShape, Network};

    pub const H: f64 = 1e-5;
    const SAMPLES: usize = 40;

    fn t(shape: [usize; 5], v: &[f64]) -> Tensor5<f64> {
        Tensor5::from_vec(shape, v.to_vec()).unwrap()
    }

    fn random_shape(rng: &mut ChaCha8Rng) -> ([usize; 5], ConvShape) {
        let n = rng.random_range(1..=2);
        let in_c = rng.random_range(1..=3);
        let out_c = rng.random_range(1..=3);
        let d = if rng.random_bool(0.75) { 3 } else { 1 };
        let dims = [rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(2..=5)];
        ([n, in_c, dims[0], dims[1], dims[2]], ConvShape { in_c, out_c, d })
    }

    /// Worst relative error over dx, dw, db.
    pub fn conv(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (xs, s) = random_shape(&mut r);
        let x: Tensor5<f64> = random_tensor(&mut r, xs);
        let w = random_vec(&mut r, s.weight_len(), 0.5);
        let b = random_vec(&mut r, s.out_c, 0.5);
        let ys = [xs[0], s.out_c, xs[2], xs[3], xs[4]];
        let rw = random_vec(&mut r, ys.iter().product(), 1.0);
        let loss = |x: &Tensor5<f64>, w: &[f64], b: &[f64]| dot(conv3d_forward(x, w, b, s).unwrap().data(), &rw);
        let g = conv3d_backward(&x, &w, &t(ys, &rw), s).unwrap();

        let cx = sample_coords(&mut r, x.data().len(), SAMPLES);
        let nx = numeric_grad(x.data(), &cx, H, |v| loss(&t(xs, v), &w, &b));
        let cw = sample_coords(&mut r, w.len(), SAMPLES);
        let nw = numeric_grad(&w, &cw, H, |v| loss(&x, v, &b));
        let cb: Vec<usize> = (0..b.len()).collect();
        let nb = numeric_grad(&b, &cb, H, |v| loss(&x, &w, v));
        let pick = |a: &[f64], c: &[usize]| c.iter().map(|&i| a[i]).collect::<Vec<_>>();
        rel_err(&pick(g.dx.data(), &cx), &nx).max(rel_err(&pick(&g.dw, &cw), &nw)).max(rel_err(&g.db, &nb))
    }

    fn random_bn(r: &mut ChaCha8Rng, c: usize) -> BatchNorm<f64> {
        let mut bn = BatchNorm::new(c);
        bn.gamma = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
        bn.beta = random_vec(r, c, 0.5);
        bn
    }

    /// Worst relative error over dx, dgamma, dbeta of training-mode BN.
    pub fn batchnorm(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (xs, _) = random_shape(&mut r);
        let xs = [xs[0], xs[1], xs[2], xs[3], xs[4].max(2)];
        let c = xs[1];
        let x: Tensor5<f64> = random_tensor(&mut r, xs);
        let bn = random_bn(&mut r, c);
        let rw = random_vec(&mut r, x.data().len(), 1.0);
        let loss = |x: &Tensor5<f64>, g: &[f64], be: &[f64]| {
            let mut b = bn.clone();
            b.gamma = g.to_vec();
            b.beta = be.to_vec();
            dot(b.forward_train(x).0.data(), &rw)
        };
        let (_, cache) = bn.clone().forward_train(&x);
        let g = bn.backward(&cache, &t(xs, &rw));
        let cx = sample_coords(&mut r, x.data().len(), SAMPLES);
        let nx = numeric_grad(x.data(), &cx, H, |v| loss(&t(xs, v), &bn.gamma, &bn.beta));
        let all: Vec<usize> = (0..c).collect();
        let ng = numeric_grad(&bn.gamma, &all, H, |v| loss(&x, v, &bn.beta));
        let nb = numeric_grad(&bn.beta, &all, H, |v| loss(&x, &bn.gamma, v));
        let pick: Vec<f64> = cx.iter().map(|&i| g.dx.data()[i]).collect();
        rel_err(&pick, &nx).max(rel_err(&g.dgamma, &ng)).max(rel_err(&g.dbeta, &nb))
    }

    /// conv → batch-norm → ReLU, checked on the input and the conv weights.
    pub fn relu_composition(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (xs, s) = random_shape(&mut r);
        let xs = [xs[0], xs[1], xs[2], xs[3], xs[4].max(2)];
        let x: Tensor5<f64> = random_tensor(&mut r, xs);
        let w = random_vec(&mut r, s.weight_len(), 0.5);
        let b = random_vec(&mut r, s.out_c, 0.1);
        let bn = random_bn(&mut r, s.out_c);
        let ys = [xs[0], s.out_c, xs[2], xs[3], xs[4]];
        let rw = random_vec(&mut r, ys.iter().product(), 1.0);
        let fwd = |x: &Tensor5<f64>, w: &[f64]| {
            let z = conv3d_forward(x, w, &b, s).unwrap();
            let (y, cache) = bn.clone().forward_train(&z);
            let a: Vec<f64> = y.data().iter().map(|&v| v.max(0.0)).collect();
            (a, cache)
        };
        let (a, cache) = fwd(&x, &w);
        let da: Vec<f64> = rw.iter().zip(&a).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
        let gbn = bn.backward(&cache, &t(ys, &da));
        let g = conv3d_backward(&x, &w, &gbn.dx, s).unwrap();
        let cx = sample_coords(&mut r, x.data().len(), SAMPLES);
        let nx = numeric_grad(x.data(), &cx, H, |v| dot(&fwd(&t(xs, v), &w).0, &rw));
        let cw = sample_coords(&mut r, w.len(), SAMPLES);
        let nw = numeric_grad(&w, &cw, H, |v| dot(&fwd(&x, v).0, &rw));
        let pick = |a: &[f64], c: &[usize]| c.iter().map(|&i| a[i]).collect::<Vec<_>>();
        rel_err(&pick(g.dx.data(), &cx), &nx).max(rel_err(&pick(&g.dw, &cw), &nw))
    }

    pub fn masked_l1(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (xs, _) = random_shape(&mut r);
        let p: Tensor5<f64> = random_tensor(&mut r, xs);
        let tgt: Tensor5<f64> = random_tensor(&mut r, xs);
        let mut mask: Vec<bool> = (0..xs[0] * p.voxels()).map(|_| r.random_bool(0.6)).collect();
        mask[0] = true;
        let (_, g) = l1_loss_masked(&p, &tgt, &mask).unwrap().unwrap();
        let c = sample_coords(&mut r, p.data().len(), SAMPLES);
        let n = numeric_grad(p.data(), &c, H, |v| l1_loss_masked(&t(xs, v), &tgt, &mask).unwrap().unwrap().0);
        let pick: Vec<f64> = c.iter().map(|&i| g.data()[i]).collect();
        rel_err(&pick, &n)
    }

    /// The whole residual network in training mode, checked on its input
    /// and on a sample of every parameter tensor.
    pub fn network(seed: u64) -> f64 {
        let mut r = rng(seed);
        let c = r.random_range(1..=3);
        let k = r.random_range(1..=3);
        let xs = [1, c, r.random_range(2..=4), r.random_range(2..=4), r.random_range(2..=4)];
        let mut net: Network<f64> = Network::build(c, k, 3, seed).unwrap();
        for p in net.params_mut() {
            for v in p.iter_mut() {
                *v += 0.05 * r.random_range(-1.0..1.0);
            }
        }
        let x: Tensor5<f64> = random_tensor(&mut r, xs);
        let rw = random_vec(&mut r, x.data().len(), 1.0);
        let (_, cache) = net.clone().forward_train(&x).unwrap();
        let g = net.backward(&cache, &t(xs, &rw)).unwrap();
        let eval = |n: &Network<f64>, x: &Tensor5<f64>| dot(n.clone().forward_train(x).unwrap().0.data(), &rw);

        let cx = sample_coords(&mut r, x.data().len(), 10);
        let nx = numeric_grad(x.data(), &cx, H, |v| eval(&net, &t(xs, v)));
        let mut analytic: Vec<f64> = cx.iter().map(|&i| g.dx.data()[i]).collect();
        let mut numeric = nx;
        let n_params = net.params().len();
        for pi in 0..n_params {
            let base = net.params()[pi].clone();
            let coords = sample_coords(&mut r, base.len(), 3);
            let ng = numeric_grad(&base, &coords, H, |v| {
                let mut n2 = net.clone();
                *n2.params_mut()[pi] = v.to_vec();
                eval(&n2, &x)
            });
            analytic.extend(coords.iter().map(|&i| g.params[pi][i]));
            numeric.extend(ng);
        }
        rel_err(&analytic, &numeric)
    }
}

/// Singular values of a 6-column matrix from a cyclic Jacobi eigen-solve of
/// AᵀA. Shares no code with the library's SVD path.
pub fn oracle_singular_values(rows: &[[f64; 6]]) -> Vec<f64> {
    let mut m = [[0.0f64; 6]; 6];
    for r in rows {
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] += r[i] * r[j];
            }
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..6 {
            for q in p + 1..6 {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-40 {
            break;
        }
        for p in 0..6 {
            for q in p + 1..6 {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..6 {
                    let (a, b) = (m[k][p], m[k][q]);
                    m[k][p] = c * a - s * b;
                    m[k][q] = s * a + c * b;
                }
                for k in 0..6 {
                    let (a, b) = (m[p][k], m[q][k]);
                    m[p][k] = c * a - s * b;
                    m[q][k] = s * a + c * b;
                }
            }
        }
    }
    (0..6).map(|i| m[i][i].max(0.0).sqrt()).collect()
}

pub fn oracle_cond(dirs: &[[f64; 3]]) -> f64 {
    let rows: Vec<[f64; 6]> = dirs
        .iter()
        .map(|g| [g[0] * g[0], g[1] * g[1], g[2] * g[2], 2.0 * g[0] * g[1], 2.0 * g[0] * g[2], 2.0 * g[1] * g[2]])
        .collect();
    let sv = oracle_singular_values(&rows);
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Direct sliding-window SSIM: 3D Gaussian weights over the in-volume part
/// of an 11³ window, renormalised.
pub fn naive_ssim(a: &[f64], b: &[f64], dims: [usize; 3], mask: &[bool]) -> f64 {
    let [nx, ny, nz] = dims;
    let g = |t: isize| (-(t * t) as f64 / (2.0 * 1.5 * 1.5)).exp();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut n = 0;
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let i = (z as usize * ny + y as usize) * nx + x as usize;
                if !mask[i] {
                    continue;
                }
                let (mut w, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dz in -5..=5isize {
                    for dy in -5..=5isize {
                        for dx in -5..=5isize {
                            let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                            if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                                continue;
                            }
                            let j = (qz as usize * ny + qy as usize) * nx + qx as usize;
                            let wt = g(dx) * g(dy) * g(dz);
                            w += wt;
                            sa += wt * a[j];
                            sb += wt * b[j];
                            saa += wt * a[j] * a[j];
                            sbb += wt * b[j] * b[j];
                            sab += wt * a[j] * b[j];
                        }
                    }
                }
                let (ma, mb) = (sa / w, sb / w);
                let va = saa / w - ma * ma;
                let vb = sbb / w - mb * mb;
                let cov = sab / w - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}
