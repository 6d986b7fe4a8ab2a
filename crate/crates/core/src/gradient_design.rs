//! Diffusion-encoding direction design.
//!
//! Six-direction sets are scored by the condition number of their tensor
//! design matrix, larger sets by an electrostatic energy with antipodal
//! charge pairs. Subsets for the self-supervised pipeline are drawn either
//! from rotated copies of an optimal six-direction set ([`design_scheme`]) or
//! by snapping rotated copies onto a fixed acquired table
//! ([`select_subsets_from_fixed`]).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Quaternion};
use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};

/// Default condition-number ceiling for subsets snapped to a fixed table.
pub const DEFAULT_COND_THRESHOLD: f64 = 1.6;

/// σ_min below this fraction of σ_max counts as rank deficient.
pub const SINGULAR_RTOL: f64 = 1e-12;

const UNIT_TOL: f64 = 1e-9;

pub type Dir = [f64; 3];

/// A list of unit encoding directions. Sign is irrelevant to every score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirectionSet(Vec<Dir>);

impl DirectionSet {
    /// Accepts directions that are already unit length within 1e-9.
    pub fn new(dirs: Vec<Dir>) -> Result<Self> {
        for (i, d) in dirs.iter().enumerate() {
            let n = norm(d);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidScheme(format!("direction {i} has norm {n}")));
            }
        }
        Ok(Self(dirs))
    }

    /// Normalises every vector; zero vectors are rejected.
    pub fn normalized(dirs: Vec<Dir>) -> Result<Self> {
        dirs.into_iter()
            .enumerate()
            .map(|(i, d)| {
                let n = norm(&d);
                if n > 0.0 && n.is_finite() {
                    Ok([d[0] / n, d[1] / n, d[2] / n])
                } else {
                    Err(Error::InvalidScheme(format!("direction {i} is zero")))
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dirs(&self) -> &[Dir] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Dir> {
        self.0
    }

    pub fn select(&self, idx: &[usize]) -> DirectionSet {
        DirectionSet(idx.iter().map(|&i| self.0[i]).collect())
    }

    pub fn rotated(&self, r: &Matrix3<f64>) -> DirectionSet {
        DirectionSet(self.0.iter().map(|d| rotate(r, d)).collect())
    }

    pub fn concat(sets: &[DirectionSet]) -> DirectionSet {
        DirectionSet(sets.iter().flat_map(|s| s.0.iter().copied()).collect())
    }
}

fn norm(d: &Dir) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn rotate(r: &Matrix3<f64>, d: &Dir) -> Dir {
    let v = r * nalgebra::Vector3::new(d[0], d[1], d[2]);
    [v.x, v.y, v.z]
}

/// Uniformly distributed random rotation.
pub fn random_rotation(rng: &mut Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let q = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    *q.to_rotation_matrix().matrix()
}

/// Row of the tensor design matrix for one direction:
/// `[gx², gy², gz², 2gxgy, 2gxgz, 2gygz]`.
pub fn design_row(g: &Dir) -> [f64; 6] {
    let [x, y, z] = *g;
    [x * x, y * y, z * z, 2.0 * x * y, 2.0 * x * z, 2.0 * y * z]
}

/// N×6 design matrix. Directions must be unit length within 1e-6.
pub fn design_matrix(dirs: &[Dir]) -> Result<DMatrix<f64>> {
    if dirs.is_empty() {
        return Err(Error::InvalidScheme("no directions".into()));
    }
    for (i, d) in dirs.iter().enumerate() {
        let n = norm(d);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidScheme(format!("direction {i} has norm {n}")));
        }
    }
    Ok(DMatrix::from_fn(dirs.len(), 6, |r, c| design_row(&dirs[r])[c]))
}

/// σ_max/σ_min of a matrix, or `SingularScheme` when σ_min < 1e-12·σ_max.
pub fn matrix_condition(a: &DMatrix<f64>) -> Result<f64> {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(min >= SINGULAR_RTOL * max) || max == 0.0 {
        return Err(Error::SingularScheme(format!("singular values span [{min:e}, {max:e}]")));
    }
    Ok(max / min)
}

/// Condition number of the 6×6 design matrix of exactly six directions.
pub fn condition_number(dirs6: &[Dir]) -> Result<f64> {
    if dirs6.len() != 6 {
        return Err(Error::InvalidInput(format!("need 6 directions, got {}", dirs6.len())));
    }
    matrix_condition(&design_matrix(dirs6)?)
}

/// Electrostatic energy with a ±u charge pair per direction:
/// `Σ_{i<j} 1/|uᵢ−uⱼ| + 1/|uᵢ+uⱼ|`.
pub fn electrostatic_energy(dirs: &[Dir]) -> Result<f64> {
    if dirs.len() < 2 {
        return Err(Error::InvalidInput("energy needs at least 2 directions".into()));
    }
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let (a, b) = (&dirs[i], &dirs[j]);
            let dm = norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            let dp = norm(&[a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
            if dm < 1e-9 || dp < 1e-9 {
                return Err(Error::SingularScheme(format!(
                    "directions {i} and {j} coincide up to sign"
                )));
            }
            e += 1.0 / dm + 1.0 / dp;
        }
    }
    Ok(e)
}

fn from_spherical(theta: f64, phi: f64) -> Dir {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

fn cond_or_inf(dirs: &[Dir]) -> f64 {
    condition_number(dirs).unwrap_or(f64::INFINITY)
}

/// Flips each direction so that its largest-magnitude component is positive.
fn canonical_sign(d: Dir) -> Dir {
    let k = (0..3).max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs())).unwrap();
    if d[k] < 0.0 {
        [-d[0], -d[1], -d[2]]
    } else {
        d
    }
}

/// Search for six directions minimising [`condition_number`].
///
/// Each restart hill-climbs on the 12 spherical angles from a random start,
/// perturbing all angles with a Gaussian step that shrinks by 0.95 after
/// every 100 rejected proposals. The best restart is then refined by the same
/// climb with a small initial step for `4·iters` proposals.
pub fn optimize_dsm6(seed: u64, restarts: usize, iters: usize) -> DirectionSet {
    let restarts = restarts.max(1);
    let results: Vec<(f64, [f64; 12])> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let start = random_angles(&mut rng);
            hill_climb(&mut rng, start, 0.1, iters)
        })
        .collect();
    // lowest cond, earliest restart on ties
    let (_, best) = results
        .into_iter()
        .fold((f64::INFINITY, [0.0; 12]), |acc, x| if x.0 < acc.0 { x } else { acc });
    let (_, best) = hill_climb(&mut stream_rng(seed, restarts as u64), best, 0.01, 4 * iters);
    DirectionSet(angles_to_dirs(&best).into_iter().map(canonical_sign).collect())
}

fn angles_to_dirs(p: &[f64; 12]) -> Vec<Dir> {
    (0..6).map(|i| from_spherical(p[2 * i], p[2 * i + 1])).collect()
}

fn random_angles(rng: &mut Rng) -> [f64; 12] {
    std::array::from_fn(|i| {
        if i % 2 == 0 {
            // uniform on the sphere
            (1.0 - 2.0 * rng.random::<f64>()).acos()
        } else {
            rng.random::<f64>() * std::f64::consts::TAU
        }
    })
}

fn hill_climb(rng: &mut Rng, mut p: [f64; 12], mut step: f64, iters: usize) -> (f64, [f64; 12]) {
    let mut cur = cond_or_inf(&angles_to_dirs(&p));
    let scale = 1.0 / 6f64.sqrt();
    let mut rejected = 0usize;
    for _ in 0..iters {
        let mut q = p;
        for a in q.iter_mut() {
            *a += step * scale * rng.sample::<f64, _>(StandardNormal);
        }
        let c = cond_or_inf(&angles_to_dirs(&q));
        if c < cur {
            p = q;
            cur = c;
        } else {
            rejected += 1;
            if rejected % 100 == 0 {
                step *= 0.95;
            }
        }
    }
    (cur, p)
}

/// The six-direction DSM layout `(a,b,0), (0,a,b), (b,0,a), (a,−b,0),
/// (0,a,−b), (−b,0,a)` with `(a, b) = (cos t, sin t)` and `t` chosen by
/// golden-section search to minimise the condition number (≈1.32288).
pub fn dsm6() -> DirectionSet {
    let family = |t: f64| {
        let (a, b) = (t.cos(), t.sin());
        vec![[a, b, 0.0], [0.0, a, b], [b, 0.0, a], [a, -b, 0.0], [0.0, a, -b], [-b, 0.0, a]]
    };
    let f = |t: f64| cond_or_inf(&family(t));
    let (mut lo, mut hi) = (0.3f64, 0.55f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-13 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if f(m1) < f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    DirectionSet(family(0.5 * (lo + hi)))
}

/// Partition of acquired diffusion-weighted directions into K six-direction
/// subsets. Indices refer to the acquired direction list (b=0 volumes
/// excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub threshold: f64,
    pub subsets: Vec<[usize; 6]>,
    pub cond_numbers: Vec<f64>,
    /// Size of the candidate pool the plan was drawn from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_candidates: Option<usize>,
}

impl SubsetPlan {
    pub fn n_subsets(&self) -> usize {
        self.subsets.len()
    }

    /// Checks disjointness, index range, and the threshold invariant.
    pub fn validate(&self, n_directions: usize) -> Result<()> {
        if self.subsets.is_empty() {
            return Err(Error::InvalidPlan("plan has no subsets".into()));
        }
        if self.cond_numbers.len() != self.subsets.len() {
            return Err(Error::InvalidPlan("one condition number per subset required".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.subsets {
            for &i in s {
                if i >= n_directions {
                    return Err(Error::InvalidPlan(format!(
                        "index {i} out of range for {n_directions} directions"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::InvalidPlan(format!("direction {i} used twice")));
                }
            }
        }
        if let Some(c) = self.cond_numbers.iter().find(|&&c| !(c < self.threshold)) {
            return Err(Error::InvalidPlan(format!(
                "condition number {c} not below threshold {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("plan JSON: {e}")))
    }
}

/// Stacks K rotated copies of `base` and keeps the rotation tuple whose
/// union has the lowest electrostatic energy over `rotation_trials` draws.
///
/// The condition number of a rotated copy depends on its orientation, so
/// each copy's rotation is redrawn (up to 10 000 times) until its condition
/// number is below `cond_threshold`. The first copy is never rotated; the
/// energy is invariant under a global rotation, so this loses nothing and
/// makes K=1 return `base` itself.
pub fn design_scheme(
    base: &DirectionSet,
    n_subsets: usize,
    seed: u64,
    rotation_trials: usize,
    cond_threshold: f64,
) -> Result<(DirectionSet, SubsetPlan)> {
    if n_subsets == 0 {
        return Err(Error::InvalidInput("need at least one subset".into()));
    }
    if base.len() != 6 {
        return Err(Error::InvalidInput(format!("base set has {} directions", base.len())));
    }
    let base_cond = condition_number(base.dirs())?;
    if !(base_cond < cond_threshold) {
        return Err(Error::InvalidInput(format!(
            "base set cond {base_cond} is not below threshold {cond_threshold}"
        )));
    }
    let build = |trial: usize| -> Option<Vec<DirectionSet>> {
        let mut rng = stream_rng(seed, trial as u64);
        let mut copies = vec![base.clone()];
        for _ in 1..n_subsets {
            let copy = (0..10_000).find_map(|_| {
                let c = base.rotated(&random_rotation(&mut rng));
                (cond_or_inf(c.dirs()) < cond_threshold).then_some(c)
            })?;
            copies.push(copy);
        }
        Some(copies)
    };

    let trials = rotation_trials.max(1);
    let best = if n_subsets == 1 {
        Some(0)
    } else {
        (0..trials)
            .into_par_iter()
            .map(|t| {
                let e = build(t)
                    .and_then(|c| electrostatic_energy(DirectionSet::concat(&c).dirs()).ok())
                    .unwrap_or(f64::INFINITY);
                (t, e)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .filter(|(_, e)| e.is_finite())
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 <= x.1 => Some(a),
                _ => Some(x),
            })
            .map(|(t, _)| t)
    };
    let copies = best.and_then(build).ok_or(Error::InsufficientCandidates {
        found: 0,
        needed: n_subsets,
        trials,
    })?;
    let cond_numbers = copies
        .iter()
        .map(|c| condition_number(c.dirs()))
        .collect::<Result<Vec<_>>>()?;
    let dirs = DirectionSet(
        DirectionSet::concat(&copies).0.into_iter().map(canonical_sign).collect(),
    );
    let plan = SubsetPlan {
        threshold: cond_threshold,
        subsets: (0..n_subsets).map(|k| std::array::from_fn(|j| 6 * k + j)).collect(),
        cond_numbers,
        n_candidates: None,
    };
    Ok((dirs, plan))
}

/// Index of the acquired direction closest to `d` up to sign.
fn nearest_direction(acquired: &[Dir], d: &Dir) -> usize {
    let mut best = (0, -1.0);
    for (i, a) in acquired.iter().enumerate() {
        // |cos| is monotone in the antipodal-aware angle
        let c = (a[0] * d[0] + a[1] * d[1] + a[2] * d[2]).abs();
        if c > best.1 {
            best = (i, c);
        }
    }
    best.0
}

/// Candidate six-subsets obtained by snapping rotated copies of `base` onto
/// `acquired`, keeping those with condition number below `threshold`.
/// Returned sorted and deduplicated, with their condition numbers.
pub fn snap_candidates(
    base: &DirectionSet,
    acquired: &DirectionSet,
    threshold: f64,
    trials: usize,
    seed: u64,
) -> Vec<([usize; 6], f64)> {
    let found: Vec<Option<[usize; 6]>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let rotated = base.rotated(&random_rotation(&mut rng));
            let mut idx: [usize; 6] = std::array::from_fn(|j| nearest_direction(acquired.dirs(), &rotated.dirs()[j]));
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return None;
            }
            Some(idx)
        })
        .collect();
    let unique: BTreeSet<[usize; 6]> = found.into_iter().flatten().collect();
    unique
        .into_iter()
        .filter_map(|idx| {
            let c = condition_number(acquired.select(&idx).dirs()).ok()?;
            (c < threshold).then_some((idx, c))
        })
        .collect()
}

/// Picks K disjoint six-direction subsets of a fixed acquired table.
///
/// Stage one builds the candidate pool with [`snap_candidates`]; stage two
/// draws `trials` random disjoint K-combinations and keeps the one whose
/// union has the lowest electrostatic energy.
pub fn select_subsets_from_fixed(
    acquired: &DirectionSet,
    n_subsets: usize,
    cond_threshold: f64,
    trials: usize,
    seed: u64,
) -> Result<SubsetPlan> {
    if n_subsets == 0 {
        return Err(Error::InvalidInput("need at least one subset".into()));
    }
    if acquired.len() < 6 * n_subsets {
        return Err(Error::InsufficientCandidates { found: 0, needed: n_subsets, trials });
    }
    let base = dsm6();
    let candidates = snap_candidates(&base, acquired, cond_threshold, trials, crate::rng::derive_seed(seed, "snap"));
    let combo_seed = crate::rng::derive_seed(seed, "combine");

    let draws: Vec<Option<(f64, Vec<usize>)>> = (0..trials.max(1))
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(combo_seed, t as u64);
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.shuffle(&mut rng);
            let mut used = BTreeSet::new();
            let mut picked = Vec::with_capacity(n_subsets);
            for c in order {
                if candidates[c].0.iter().all(|i| !used.contains(i)) {
                    used.extend(candidates[c].0);
                    picked.push(c);
                    if picked.len() == n_subsets {
                        break;
                    }
                }
            }
            if picked.len() < n_subsets {
                return None;
            }
            let union: Vec<usize> = picked.iter().flat_map(|&c| candidates[c].0).collect();
            let e = electrostatic_energy(acquired.select(&union).dirs()).ok()?;
            picked.sort_unstable();
            Some((e, picked))
        })
        .collect();

    let best = draws
        .into_iter()
        .flatten()
        .fold(None::<(f64, Vec<usize>)>, |acc, x| match acc {
            Some(a) if a.0 <= x.0 => Some(a),
            _ => Some(x),
        });
    let Some((_, picked)) = best else {
        return Err(Error::InsufficientCandidates { found: candidates.len(), needed: n_subsets, trials });
    };
    Ok(SubsetPlan {
        threshold: cond_threshold,
        subsets: picked.iter().map(|&c| candidates[c].0).collect(),
        cond_numbers: picked.iter().map(|&c| candidates[c].1).collect(),
        n_candidates: Some(candidates.len()),
    })
}

/// `n` directions spread over the sphere by minimising
/// [`electrostatic_energy`] with projected gradient descent.
pub fn uniform_directions(n: usize, seed: u64, iters: usize) -> DirectionSet {
    let mut rng = stream_rng(seed, 0);
    let mut dirs: Vec<Dir> = (0..n)
        .map(|_| {
            let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let l = norm(&v);
            [v[0] / l, v[1] / l, v[2] / l]
        })
        .collect();
    if n < 2 {
        return DirectionSet(dirs);
    }
    let mut energy = electrostatic_energy(&dirs).unwrap_or(f64::INFINITY);
    let mut lr = 1e-3;
    for _ in 0..iters {
        let mut grad = vec![[0.0f64; 3]; n];
        for i in 0..n {
            for j in i + 1..n {
                for s in [-1.0, 1.0] {
                    let d = [dirs[i][0] + s * dirs[j][0], dirs[i][1] + s * dirs[j][1], dirs[i][2] + s * dirs[j][2]];
                    let r = norm(&d);
                    let f = 1.0 / (r * r * r);
                    for k in 0..3 {
                        grad[i][k] -= f * d[k];
                        grad[j][k] -= s * f * d[k];
                    }
                }
            }
        }
        let trial: Vec<Dir> = dirs
            .iter()
            .zip(&grad)
            .map(|(u, g)| {
                let radial = u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
                let v = [
                    u[0] - lr * (g[0] - radial * u[0]),
                    u[1] - lr * (g[1] - radial * u[1]),
                    u[2] - lr * (g[2] - radial * u[2]),
                ];
                let l = norm(&v);
                [v[0] / l, v[1] / l, v[2] / l]
            })
            .collect();
        match electrostatic_energy(&trial) {
            Ok(e) if e < energy => {
                dirs = trial;
                energy = e;
                lr *= 1.2;
            }
            _ => {
                lr *= 0.5;
                if lr < 1e-14 {
                    break;
                }
            }
        }
    }
    DirectionSet(dirs.into_iter().map(canonical_sign).collect())
}
