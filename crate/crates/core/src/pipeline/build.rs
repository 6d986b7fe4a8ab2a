use rayon::prelude::*;

use super::pairs::TrainingPair;
use crate::error::{Error, Result};
use crate::gradient_design::SubsetPlan;
use crate::tensor_model::{fit_tensor, mean_b0, synthesize_dwis, S0Source};
use crate::volume::{BrainMask, GradientScheme, Volume4D};

/// One b=0 volume followed by every non-b0 volume of `scheme`, in order.
pub fn pair_scheme(scheme: &GradientScheme) -> Result<GradientScheme> {
    let dwi = scheme.dwi_indices();
    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0; 3]];
    for &i in &dwi {
        bvals.push(scheme.bvals()[i]);
        bvecs.push(scheme.bvecs()[i]);
    }
    GradientScheme::new(bvals, bvecs, crate::volume::DEFAULT_B0_THRESHOLD)
}

fn check_data(data: &Volume4D, scheme: &GradientScheme, mask: &BrainMask) -> Result<()> {
    if scheme.n_volumes() != data.n_volumes() {
        return Err(Error::Shape(format!("scheme has {} volumes, data {}", scheme.n_volumes(), data.n_volumes())));
    }
    mask.check_matches(data.spatial_dims())
}

/// The all-data tensor synthesis used as the self-supervised target:
/// averaged b0 then every acquired DWI direction.
pub fn all_data_target(data: &Volume4D, scheme: &GradientScheme, mask: &BrainMask) -> Result<Volume4D> {
    check_data(data, scheme, mask)?;
    let s0 = mean_b0(data, scheme)?;
    let tf = fit_tensor(data, scheme, mask, S0Source::MeanOfB0)?;
    Ok(synthesize_dwis(&tf, &s0, &pair_scheme(scheme)?, mask)?.with_voxel_size(data.voxel_size()))
}

/// One pair per subset of `plan`. The input of subset `k` is the `k`-th
/// raw b=0 volume (zeroed outside the mask) followed by all acquired DWI
/// directions synthesised from the tensor fitted to that subset's six DWIs
/// (with the averaged b0 as S0). The shared target is the averaged b0 followed by the same
/// directions synthesised from the tensor fitted to all the data.
///
/// Subset indices in `plan` refer to the non-b0 volumes in acquisition order.
pub fn build_selfsup_pairs(
    data: &Volume4D,
    scheme: &GradientScheme,
    plan: &SubsetPlan,
    mask: &BrainMask,
) -> Result<Vec<TrainingPair>> {
    check_data(data, scheme, mask)?;
    let b0 = scheme.b0_indices();
    let dwi = scheme.dwi_indices();
    plan.validate(dwi.len())?;
    if b0.len() < plan.n_subsets() {
        return Err(Error::InvalidPlan(format!(
            "{} subsets need as many b=0 volumes, data has {}",
            plan.n_subsets(),
            b0.len()
        )));
    }
    let out_scheme = pair_scheme(scheme)?;
    let s0 = mean_b0(data, scheme)?;
    let target = all_data_target(data, scheme, mask)?;

    plan.subsets
        .par_iter()
        .enumerate()
        .map(|(k, subset)| {
            let idx: Vec<usize> = subset.iter().map(|&j| dwi[j]).collect();
            let sub = data.select_volumes(&idx)?;
            let sub_scheme = scheme.select(&idx)?;
            let tf = fit_tensor(&sub, &sub_scheme, mask, S0Source::Provided(&s0))?;
            let mut input = synthesize_dwis(&tf, &s0, &out_scheme, mask)?.with_voxel_size(data.voxel_size());
            let raw_b0 = data.volume(b0[k]);
            for (i, o) in input.volume_mut(0).iter_mut().enumerate() {
                *o = if mask.data()[i] { raw_b0[i] } else { 0.0 };
            }
            TrainingPair::new(input, target.clone(), mask.data().to_vec(), "subject", k)
        })
        .collect()
}

/// Raw data as input. The target is `clean_target` when given, otherwise
/// the all-data tensor synthesis laid out like the input (every b=0
/// position holds the averaged b0).
pub fn build_supervised_pairs(
    data: &Volume4D,
    scheme: &GradientScheme,
    mask: &BrainMask,
    clean_target: Option<&Volume4D>,
) -> Result<TrainingPair> {
    check_data(data, scheme, mask)?;
    let target = match clean_target {
        Some(t) => {
            if t.dims() != data.dims() {
                return Err(Error::Shape(format!("clean target {:?} vs data {:?}", t.dims(), data.dims())));
            }
            t.clone()
        }
        None => {
            let s0 = mean_b0(data, scheme)?;
            let tf = fit_tensor(data, scheme, mask, S0Source::MeanOfB0)?;
            synthesize_dwis(&tf, &s0, scheme, mask)?.with_voxel_size(data.voxel_size())
        }
    };
    TrainingPair::new(data.clone(), target, mask.data().to_vec(), "subject", 0)
}

/// Voxelwise mean of equally shaped volumes.
pub fn average_denoised(vols: &[Volume4D]) -> Result<Volume4D> {
    let first = vols.first().ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
    if let Some(v) = vols.iter().find(|v| v.dims() != first.dims()) {
        return Err(Error::Shape(format!("cannot average {:?} with {:?}", first.dims(), v.dims())));
    }
    let mut out = first.clone();
    let k = vols.len() as f64;
    out.data_mut().par_iter_mut().enumerate().for_each(|(i, o)| {
        *o = vols.iter().map(|v| v.data()[i]).sum::<f64>() / k;
    });
    Ok(out)
}
