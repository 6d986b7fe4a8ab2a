//! The residual 3D network: ten stride-1 conv layers at constant width `k`.
//!
//! ```text
//! h1 = relu(bn(conv(x)))            c  -> k
//! h2..h5 = relu(bn(conv(h_prev)))   k  -> k
//! h6 = relu(bn(conv([h5; h4])))     2k -> k
//! h7 = relu(bn(conv([h6; h3])))     2k -> k
//! h8 = relu(bn(conv([h7; h2])))     2k -> k
//! h9 = relu(bn(conv([h8; h1])))     2k -> k
//! out = x + conv(h9)                k  -> c
//! ```

use rand_distr::{Distribution, Normal};

use super::batchnorm::{BatchNorm, BnCache};
use super::conv::{conv3d_backward, conv3d_forward, ConvShape};
use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const N_LAYERS: usize = 10;

/// Identifier of the four concatenation skips above, stored in model files.
pub const SKIP_TOPOLOGY_MUNET: u32 = 1;

/// Layer (0-based) whose output is concatenated onto the input of layer `l`.
pub fn skip_source(l: usize) -> Option<usize> {
    (5..=8).contains(&l).then(|| 8 - l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub shape: ConvShape,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    c: usize,
    k: usize,
    d: usize,
    pub convs: Vec<ConvLayer<T>>,
    pub bns: Vec<BatchNorm<T>>,
}

/// The stored, trained precision.
pub type DenoiserModel = Network<f32>;

pub struct ForwardCache<T> {
    inputs: Vec<Tensor5<T>>,
    bn: Vec<BnCache<T>>,
    acts: Vec<Tensor5<T>>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub dx: Tensor5<T>,
    /// Same order as [`Network::params_mut`].
    pub params: Vec<Vec<T>>,
}

/// Conv weight count of the architecture without building it.
pub fn conv_weight_count(c: usize, k: usize, d: usize) -> usize {
    let d3 = d * d * d;
    2 * c * k * d3 + 4 * k * k * d3 + 4 * 2 * k * k * d3
}

pub fn layer_shapes(c: usize, k: usize, d: usize) -> Vec<ConvShape> {
    (0..N_LAYERS)
        .map(|l| match l {
            0 => ConvShape { in_c: c, out_c: k, d },
            9 => ConvShape { in_c: k, out_c: c, d },
            l if skip_source(l).is_some() => ConvShape { in_c: 2 * k, out_c: k, d },
            _ => ConvShape { in_c: k, out_c: k, d },
        })
        .collect()
}

fn relu<T: Scalar>(mut x: Tensor5<T>) -> Tensor5<T> {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    x
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor5<T>>, g: Tensor5<T>) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Network<T> {
    /// He-normal weights, zero biases, unit BN scale.
    pub fn build(c: usize, k: usize, d: usize, seed: u64) -> Result<Self> {
        if c == 0 || k == 0 || d % 2 == 0 {
            return Err(Error::Shape(format!("invalid architecture c={c} k={k} d={d}")));
        }
        let convs = layer_shapes(c, k, d)
            .into_iter()
            .enumerate()
            .map(|(l, shape)| {
                let fan_in = shape.in_c * d * d * d;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let mut rng = stream_rng(seed, l as u64);
                let weight = (0..shape.weight_len()).map(|_| T::of(normal.sample(&mut rng))).collect();
                ConvLayer { shape, weight, bias: vec![T::zero(); shape.out_c] }
            })
            .collect();
        let bns = (0..N_LAYERS - 1).map(|_| BatchNorm::new(k)).collect();
        Ok(Self { c, k, d, convs, bns })
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn width(&self) -> usize {
        self.k
    }

    pub fn kernel(&self) -> usize {
        self.d
    }

    pub fn skip_topology(&self) -> u32 {
        SKIP_TOPOLOGY_MUNET
    }

    /// Voxels of context each output voxel sees on either side.
    pub fn receptive_radius(&self) -> usize {
        N_LAYERS * (self.d - 1) / 2
    }

    pub fn conv_weight_count(&self) -> usize {
        self.convs.iter().map(|l| l.weight.len()).sum()
    }

    /// Trainable parameters: conv weights and biases, BN scale and shift.
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.bns.iter().map(|b| 2 * b.channels()).sum::<usize>()
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, then
    /// BN gamma and beta for layers 1-9.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::with_capacity(4 * N_LAYERS);
        let mut bns = self.bns.iter_mut();
        for conv in self.convs.iter_mut() {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
            if let Some(bn) = bns.next() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::with_capacity(4 * N_LAYERS);
        for (l, conv) in self.convs.iter().enumerate() {
            out.push(&conv.weight);
            out.push(&conv.bias);
            if let Some(bn) = self.bns.get(l) {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    /// Sets the final layer to zero so the network is the identity map.
    pub fn zero_last_layer(&mut self) {
        let last = &mut self.convs[N_LAYERS - 1];
        last.weight.iter_mut().for_each(|w| *w = T::zero());
        last.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn same_architecture<U>(&self, other: &Network<U>) -> bool {
        self.c == other.c && self.k == other.k && self.d == other.d
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let v = |x: &[T]| x.iter().map(|&a| U::of(a.f64())).collect::<Vec<U>>();
        Network {
            c: self.c,
            k: self.k,
            d: self.d,
            convs: self
                .convs
                .iter()
                .map(|l| ConvLayer { shape: l.shape, weight: v(&l.weight), bias: v(&l.bias) })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BatchNorm {
                    gamma: v(&b.gamma),
                    beta: v(&b.beta),
                    running_mean: v(&b.running_mean),
                    running_var: v(&b.running_var),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        if x.channels() != self.c {
            return Err(Error::Shape(format!("model expects {} channels, got {}", self.c, x.channels())));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize, x: &Tensor5<T>, acts: &[Tensor5<T>]) -> Result<Tensor5<T>> {
        Ok(match (l, skip_source(l)) {
            (0, _) => x.clone(),
            (_, Some(s)) => Tensor5::concat_channels(&acts[l - 1], &acts[s])?,
            _ => acts[l - 1].clone(),
        })
    }

    /// Inference mode forward: BN uses running statistics.
    pub fn forward(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        self.check_input(x)?;
        let mut acts: Vec<Tensor5<T>> = Vec::with_capacity(N_LAYERS - 1);
        for l in 0..N_LAYERS - 1 {
            let input = self.layer_input(l, x, &acts)?;
            let conv = &self.convs[l];
            let z = conv3d_forward(&input, &conv.weight, &conv.bias, conv.shape)?;
            acts.push(relu(self.bns[l].forward_inference(&z)));
        }
        let last = &self.convs[N_LAYERS - 1];
        let mut out = conv3d_forward(&acts[N_LAYERS - 2], &last.weight, &last.bias, last.shape)?;
        out.add_assign(x);
        Ok(out)
    }

    /// Training mode forward: BN uses batch statistics and updates its
    /// running estimates.
    pub fn forward_train(&mut self, x: &Tensor5<T>) -> Result<(Tensor5<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut cache = ForwardCache { inputs: Vec::with_capacity(N_LAYERS), bn: Vec::new(), acts: Vec::new() };
        for l in 0..N_LAYERS - 1 {
            let input = self.layer_input(l, x, &cache.acts)?;
            let conv = &self.convs[l];
            let z = conv3d_forward(&input, &conv.weight, &conv.bias, conv.shape)?;
            let (y, bc) = self.bns[l].forward_train(&z);
            cache.inputs.push(input);
            cache.bn.push(bc);
            cache.acts.push(relu(y));
        }
        let last = &self.convs[N_LAYERS - 1];
        let h = cache.acts[N_LAYERS - 2].clone();
        let mut out = conv3d_forward(&h, &last.weight, &last.bias, last.shape)?;
        cache.inputs.push(h);
        out.add_assign(x);
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &ForwardCache<T>, dout: &Tensor5<T>) -> Result<Gradients<T>> {
        let mut conv_grads: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; N_LAYERS];
        let mut bn_grads: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; N_LAYERS - 1];
        let mut dacts: Vec<Option<Tensor5<T>>> = vec![None; N_LAYERS - 1];

        let last = &self.convs[N_LAYERS - 1];
        let g = conv3d_backward(&cache.inputs[N_LAYERS - 1], &last.weight, dout, last.shape)?;
        conv_grads[N_LAYERS - 1] = Some((g.dw, g.db));
        dacts[N_LAYERS - 2] = Some(g.dx);

        let mut dx = dout.clone();
        for l in (0..N_LAYERS - 1).rev() {
            let mut dz = dacts[l].take().expect("every activation feeds a later layer");
            for (g, &a) in dz.data_mut().iter_mut().zip(cache.acts[l].data()) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            let bg = self.bns[l].backward(&cache.bn[l], &dz);
            bn_grads[l] = Some((bg.dgamma, bg.dbeta));
            let conv = &self.convs[l];
            let g = conv3d_backward(&cache.inputs[l], &conv.weight, &bg.dx, conv.shape)?;
            conv_grads[l] = Some((g.dw, g.db));
            match (l, skip_source(l)) {
                (0, _) => dx.add_assign(&g.dx),
                (_, Some(s)) => {
                    let (dprev, dskip) = g.dx.split_channels(self.k);
                    accumulate(&mut dacts[l - 1], dprev);
                    accumulate(&mut dacts[s], dskip);
                }
                _ => accumulate(&mut dacts[l - 1], g.dx),
            }
        }

        let mut params = Vec::with_capacity(4 * N_LAYERS);
        for l in 0..N_LAYERS {
            let (dw, db) = conv_grads[l].take().unwrap();
            params.push(dw);
            params.push(db);
            if l < N_LAYERS - 1 {
                let (dg, dbeta) = bn_grads[l].take().unwrap();
                params.push(dg);
                params.push(dbeta);
            }
        }
        Ok(Gradients { dx, params })
    }
}

pub fn build_model(c: usize, k: usize, d: usize, seed: u64) -> Result<DenoiserModel> {
    DenoiserModel::build(c, k, d, seed)
}
