//! Image-quality and DTI-agreement metrics.
//!
//! Image metrics compare volumes after [`rescale_for_metrics`]: intensities
//! are standardised, clipped to ±3 and mapped to [0, 1], so the PSNR peak is 1.
//! Every metric is averaged over brain-mask voxels only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pipeline::StandardizationParams;
use crate::tensor_model::DtiMetrics;
use crate::volume::Volume4D;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const PSNR_MSE_FLOOR: f64 = 1e-20;

pub fn rescale_for_metrics(vol: &Volume4D, params: &StandardizationParams) -> Volume4D {
    let mut out = vol.clone();
    for x in out.data_mut() {
        *x = (params.apply(*x).clamp(-3.0, 3.0) + 3.0) / 6.0;
    }
    out
}

fn check(a: &[f64], b: &[f64], mask: &[bool]) -> Result<usize> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::Shape(format!("metric inputs of {}, {} and mask {}", a.len(), b.len(), mask.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::DegenerateInput("empty mask".into()));
    }
    Ok(n)
}

pub fn mae(a: &[f64], b: &[f64], mask: &[bool]) -> Result<f64> {
    let n = check(a, b, mask)?;
    let s: f64 = a.iter().zip(b).zip(mask).filter(|(_, &m)| m).map(|((x, y), _)| (x - y).abs()).sum();
    Ok(s / n as f64)
}

pub fn mse(a: &[f64], b: &[f64], mask: &[bool]) -> Result<f64> {
    let n = check(a, b, mask)?;
    let s: f64 = a.iter().zip(b).zip(mask).filter(|(_, &m)| m).map(|((x, y), _)| (x - y).powi(2)).sum();
    Ok(s / n as f64)
}

/// Peak 1. Returns `f64::INFINITY` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], mask: &[bool]) -> Result<f64> {
    let m = mse(a, b, mask)?;
    Ok(if m < PSNR_MSE_FLOOR { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_taps() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as isize;
    (-h..=h).map(|t| (-(t * t) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect()
}

/// Gaussian filter along one axis; taps that fall outside the volume are
/// dropped and the rest renormalised.
fn filter_axis(src: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let h = taps.len() / 2;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![0.0; src.len()];
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        let pos = (i / stride) % n;
        let lo = pos.saturating_sub(h);
        let hi = (pos + h).min(n - 1);
        let (mut s, mut w) = (0.0, 0.0);
        for q in lo..=hi {
            let t = taps[q + h - pos];
            s += t * src[i - pos * stride + q * stride];
            w += t;
        }
        *o = s / w;
    });
    out
}

fn smooth(src: &[f64], dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let x = filter_axis(src, dims, 0, taps);
    let y = filter_axis(&x, dims, 1, taps);
    filter_axis(&y, dims, 2, taps)
}

/// Local SSIM with an 11³ Gaussian window (σ = 1.5), averaged over `mask`.
/// `dims` is `[nx, ny, nz]`; near the volume edge the window is truncated
/// and renormalised.
pub fn ssim(a: &[f64], b: &[f64], dims: [usize; 3], mask: &[bool]) -> Result<f64> {
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::Window { dims: (dims[0], dims[1], dims[2]), window: SSIM_WINDOW });
    }
    let n = check(a, b, mask)?;
    if a.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape(format!("{} voxels for dims {dims:?}", a.len())));
    }
    let taps = gaussian_taps();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let [ma, mb, mab, maa, mbb] = [a, b, &ab[..], &aa[..], &bb[..]].map(|v| smooth(v, dims, &taps));
    let mut total = 0.0;
    for i in (0..a.len()).filter(|&i| mask[i]) {
        let va = maa[i] - ma[i] * ma[i];
        let vb = mbb[i] - mb[i] * mb[i];
        let cov = mab[i] - ma[i] * mb[i];
        total += ((2.0 * ma[i] * mb[i] + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma[i] * ma[i] + mb[i] * mb[i] + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// Mean angle in degrees between axes, sign-blind, so within [0°, 90°].
pub fn angular_mad(v1a: &[[f64; 3]], v1b: &[[f64; 3]], mask: &[bool]) -> Result<f64> {
    if v1a.len() != v1b.len() || v1a.len() != mask.len() {
        return Err(Error::Shape("vector fields and mask differ in size".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::DegenerateInput("empty mask".into()));
    }
    let mut total = 0.0;
    for ((u, v), _) in v1a.iter().zip(v1b).zip(mask).filter(|(_, &m)| m) {
        for w in [u, v] {
            let norm = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("vector {w:?} is not unit length")));
            }
        }
        let c = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).abs().min(1.0);
        total += c.acos().to_degrees();
    }
    Ok(total / n as f64)
}

pub fn scalar_mad(a: &[f64], b: &[f64], mask: &[bool]) -> Result<f64> {
    mae(a, b, mask)
}

/// A metric value that serialises `±∞` as the strings `"inf"` / `"-inf"`
/// (JSON has no infinity).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Value(pub f64);

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            v if v == f64::INFINITY => s.serialize_str("inf"),
            v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
            v if v.is_nan() => s.serialize_str("nan"),
            v => s.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        Ok(Value(match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Str(s) => match s.as_str() {
                "inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                "nan" => f64::NAN,
                other => return Err(serde::de::Error::custom(format!("bad metric value {other:?}"))),
            },
        }))
    }
}

/// Image metrics for one volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeQuality {
    pub mae: Value,
    pub psnr: Value,
    pub ssim: Value,
}

/// Metrics of one processing stage against ground truth. Image metrics
/// are averaged across the compared volumes; DTI metrics are MADs (V1 in
/// degrees, diffusivities in μm²/ms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub values: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_volume: Vec<VolumeQuality>,
}

/// One subject's metrics for every evaluated stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subject: String,
    pub stages: Vec<StageMetrics>,
}

pub const IMAGE_KEYS: [&str; 3] = ["mae", "psnr", "ssim"];
pub const DTI_KEYS: [&str; 6] = ["v1_mad_deg", "v1_mad_deg_all", "fa_mad", "md_mad", "ad_mad", "rd_mad"];

/// `v1_mad_deg` only counts voxels whose true FA reaches this; the
/// principal axis of an isotropic tensor is arbitrary. `v1_mad_deg_all`
/// covers the whole mask.
pub const V1_MIN_FA: f64 = 0.2;

/// Per-volume MAE/PSNR/SSIM of rescaled volume stacks. `vols` pairs the
/// channel of `a` with the channel of `b` to compare.
pub fn image_quality(a: &Volume4D, b: &Volume4D, vols: &[(usize, usize)], mask: &[bool]) -> Result<Vec<VolumeQuality>> {
    if a.spatial_dims() != b.spatial_dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    vols.par_iter()
        .map(|&(i, j)| {
            let (x, y) = (a.volume(i), b.volume(j));
            Ok(VolumeQuality {
                mae: Value(mae(x, y, mask)?),
                psnr: Value(psnr(x, y, mask)?),
                ssim: Value(ssim(x, y, a.spatial_dims(), mask)?),
            })
        })
        .collect()
}

/// V1/FA/MD/AD/RD mean absolute differences.
pub fn dti_agreement(est: &DtiMetrics, truth: &DtiMetrics, mask: &[bool]) -> Result<BTreeMap<String, Value>> {
    if truth.fa.len() != mask.len() {
        return Err(Error::Shape("truth metrics and mask differ in size".into()));
    }
    let oriented: Vec<bool> = mask.iter().zip(&truth.fa).map(|(&m, &fa)| m && fa >= V1_MIN_FA).collect();
    let mut out = BTreeMap::new();
    let v1 = if oriented.contains(&true) { angular_mad(&est.v1, &truth.v1, &oriented)? } else { f64::NAN };
    out.insert("v1_mad_deg".into(), Value(v1));
    out.insert("v1_mad_deg_all".into(), Value(angular_mad(&est.v1, &truth.v1, mask)?));
    out.insert("fa_mad".into(), Value(scalar_mad(&est.fa, &truth.fa, mask)?));
    out.insert("md_mad".into(), Value(scalar_mad(&est.md, &truth.md, mask)?));
    out.insert("ad_mad".into(), Value(scalar_mad(&est.ad, &truth.ad, mask)?));
    out.insert("rd_mad".into(), Value(scalar_mad(&est.rd, &truth.rd, mask)?));
    Ok(out)
}

impl StageMetrics {
    pub fn new(stage: impl Into<String>, per_volume: Vec<VolumeQuality>, dti: Option<BTreeMap<String, Value>>) -> Self {
        let mut values = BTreeMap::new();
        if !per_volume.is_empty() {
            let n = per_volume.len() as f64;
            values.insert("mae".into(), Value(per_volume.iter().map(|q| q.mae.0).sum::<f64>() / n));
            values.insert("psnr".into(), Value(per_volume.iter().map(|q| q.psnr.0).sum::<f64>() / n));
            values.insert("ssim".into(), Value(per_volume.iter().map(|q| q.ssim.0).sum::<f64>() / n));
        }
        values.extend(dti.unwrap_or_default());
        Self { stage: stage.into(), values, per_volume }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).map(|v| v.0)
    }
}

impl MetricReport {
    pub fn stage(&self, name: &str) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<(String, BTreeMap<String, String>)> = self
            .stages
            .iter()
            .map(|s| (s.stage.clone(), s.values.iter().map(|(k, v)| (k.clone(), fmt_value(v.0))).collect()))
            .collect();
        table(&format!("subject {}", self.subject), &rows)
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.4e}")
    } else {
        format!("{v:.4}")
    }
}

fn table(title: &str, rows: &[(String, BTreeMap<String, String>)]) -> String {
    let keys: Vec<&str> = IMAGE_KEYS
        .iter()
        .chain(DTI_KEYS.iter())
        .copied()
        .filter(|k| rows.iter().any(|(_, r)| r.contains_key(*k)))
        .collect();
    let stage_w = rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(5);
    let widths: Vec<usize> = keys
        .iter()
        .map(|k| rows.iter().filter_map(|(_, r)| r.get(*k)).map(|c| c.len()).max().unwrap_or(0).max(k.len()))
        .collect();
    let mut out = format!("{title}\n");
    write!(out, "{:<stage_w$}", "stage").unwrap();
    for (k, w) in keys.iter().zip(&widths) {
        write!(out, "  {k:>w$}").unwrap();
    }
    out.push('\n');
    for (stage, r) in rows {
        write!(out, "{stage:<stage_w$}").unwrap();
        for (k, w) in keys.iter().zip(&widths) {
            write!(out, "  {:>w$}", r.get(*k).map(String::as_str).unwrap_or("-")).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Value,
    /// Sample standard deviation (n−1); 0 for a single subject.
    pub std: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStage {
    pub stage: String,
    pub values: BTreeMap<String, MeanStd>,
}

/// Group mean ± standard deviation across subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub n_subjects: usize,
    /// Set when `n_subjects == 1`, where the standard deviation is undefined
    /// and reported as 0.
    pub single_subject: bool,
    pub stages: Vec<GroupStage>,
}

/// Stages and metrics present in every report are aggregated, in the order
/// of the first report.
pub fn aggregate(reports: &[MetricReport]) -> Result<GroupReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidInput("no reports to aggregate".into()))?;
    let n = reports.len();
    let mut stages = Vec::new();
    for s in &first.stages {
        let mut values = BTreeMap::new();
        'metric: for key in s.values.keys() {
            let mut xs = Vec::with_capacity(n);
            for r in reports {
                match r.stage(&s.stage).and_then(|st| st.get(key)) {
                    Some(v) => xs.push(v),
                    None => continue 'metric,
                }
            }
            // summation in sorted order so subject order cannot change the result
            xs.sort_by(|a, b| a.total_cmp(b));
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            values.insert(key.clone(), MeanStd { mean: Value(mean), std: Value(std) });
        }
        stages.push(GroupStage { stage: s.stage.clone(), values });
    }
    Ok(GroupReport { n_subjects: n, single_subject: n == 1, stages })
}

impl GroupReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<(String, BTreeMap<String, String>)> = self
            .stages
            .iter()
            .map(|s| {
                let cells = s
                    .values
                    .iter()
                    .map(|(k, v)| (k.clone(), format!("{} ± {}", fmt_value(v.mean.0), fmt_value(v.std.0))))
                    .collect();
                (s.stage.clone(), cells)
            })
            .collect();
        table(&format!("{} subject(s), mean ± std", self.n_subjects), &rows)
    }
}
