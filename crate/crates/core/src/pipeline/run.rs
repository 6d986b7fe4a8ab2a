use std::time::Instant;

use super::blocks::{augment_flip, extract_blocks_with};
use super::build::{average_denoised, build_selfsup_pairs, build_supervised_pairs, pair_scheme};
use super::pairs::TrainingPair;
use super::standardize::{standardize_with, StandardizationParams};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::gradient_design::{design_scheme, dsm6, select_subsets_from_fixed, DirectionSet, SubsetPlan};
use crate::io::{load_model, read_gradients_scaled, read_nifti};
use crate::nn::{build_model, denoise_volume, train, DenoiserModel, EpochRecord};
use crate::phantom::{clean_signal, make_phantom, simulate_acquisition};
use crate::quality_metrics::{dti_agreement, image_quality, rescale_for_metrics, MetricReport, StageMetrics};
use crate::rng::derive_seed;
use crate::tensor_model::{dti_metrics, fit_tensor, DtiMetrics, S0Source};
use crate::volume::{BrainMask, GradientScheme, Volume4D};

/// Ground truth for evaluation.
#[derive(Debug, Clone)]
pub struct Truth {
    /// Noise-free signal laid out like the acquired data.
    pub clean: Volume4D,
    /// True DTI metrics; fitted from `clean` when absent.
    pub dti: Option<DtiMetrics>,
}

/// Acquired data with its scheme attached.
#[derive(Debug, Clone)]
pub struct Subject {
    pub data: Volume4D,
    pub mask: BrainMask,
    pub truth: Option<Truth>,
    /// Known when the scheme was designed rather than read.
    pub plan: Option<SubsetPlan>,
}

impl Subject {
    pub fn scheme(&self) -> &GradientScheme {
        self.data.scheme().expect("subject data carries its scheme")
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub subject: Subject,
    pub plan: Option<SubsetPlan>,
    pub model: DenoiserModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub params: Vec<StandardizationParams>,
    /// One denoised volume per pair (per subset in self-supervised mode).
    pub subset_outputs: Vec<Volume4D>,
    pub denoised: Volume4D,
    pub dti: DtiMetrics,
    pub report: Option<MetricReport>,
    /// Wall seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

struct Timer(Vec<(String, f64)>);

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        let secs = t.elapsed().as_secs_f64();
        log::info!("stage {stage}: {secs:.2}s");
        self.0.push((stage.to_string(), secs));
        Ok(out)
    }
}

/// The designed acquisition for a phantom run: DSM copies as the DWI
/// directions, `n_b0` b=0 volumes first.
pub fn designed_scheme(cfg: &RunConfig, n_b0: usize, bval: f64) -> Result<(GradientScheme, SubsetPlan)> {
    let (dirs, plan) = design_scheme(
        &dsm6(),
        cfg.design.subsets,
        derive_seed(cfg.seed, "design"),
        cfg.design.rotation_trials,
        cfg.design.cond_threshold,
    )?;
    Ok((GradientScheme::from_directions(n_b0, dirs.dirs(), bval)?, plan))
}

pub fn load_subject(cfg: &RunConfig) -> Result<Subject> {
    if let Some(p) = &cfg.phantom {
        let scene = make_phantom(p.shape, p.seed, &p.spec)?;
        let (scheme, plan) = designed_scheme(cfg, p.n_b0, p.bval)?;
        let sigma = p.sigma.unwrap_or_else(|| scene.hcp_like_sigma());
        let data = simulate_acquisition(&scene, &scheme, sigma, derive_seed(p.seed, "noise"))?;
        let clean = clean_signal(&scene, &scheme)?;
        let dti = dti_metrics(&scene.tensor_field, &scene.mask)?;
        log::info!("phantom {:?}, sigma {sigma:.3}, {} brain voxels", p.shape, scene.mask.count());
        return Ok(Subject { data, mask: scene.mask, truth: Some(Truth { clean, dti: Some(dti) }), plan: Some(plan) });
    }
    let d = cfg.data.as_ref().ok_or_else(|| Error::Config("no [data] or [phantom] section".into()))?;
    let scheme = read_gradients_scaled(&d.bvals, &d.bvecs, crate::volume::DEFAULT_B0_THRESHOLD, d.bval_scale)?;
    let data = read_nifti(&d.dwi)?.with_scheme(scheme.clone())?;
    let mask = match &d.mask {
        Some(m) => BrainMask::from_volume(&read_nifti(m)?)?,
        None => BrainMask::full(data.spatial_dims()),
    };
    mask.check_matches(data.spatial_dims())?;
    let truth = match &d.reference {
        Some(r) => {
            let clean = read_nifti(r)?;
            if clean.dims() != data.dims() {
                return Err(Error::Shape(format!("reference {:?} vs data {:?}", clean.dims(), data.dims())));
            }
            Some(Truth { clean: clean.with_scheme(scheme)?, dti: None })
        }
        None => None,
    };
    Ok(Subject { data, mask, truth, plan: None })
}

/// Plan from file, from the design, or selected from the acquired directions.
pub fn resolve_plan(cfg: &RunConfig, subject: &Subject) -> Result<SubsetPlan> {
    if let Some(path) = &cfg.design.plan {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return SubsetPlan::from_json(&text);
    }
    if let Some(p) = &subject.plan {
        return Ok(p.clone());
    }
    let scheme = subject.scheme();
    let dirs: Vec<[f64; 3]> = scheme.dwi_indices().iter().map(|&i| scheme.bvecs()[i]).collect();
    select_subsets_from_fixed(
        &DirectionSet::new(dirs)?,
        cfg.design.subsets,
        cfg.design.cond_threshold,
        cfg.design.selection_trials,
        derive_seed(cfg.seed, "select"),
    )
}

/// Standardises a pair with parameters from its input.
pub fn standardize_pair(pair: &TrainingPair, mask: &BrainMask) -> Result<(TrainingPair, StandardizationParams)> {
    let params = StandardizationParams::from_volume(&pair.input, mask)?;
    let mut out = pair.clone();
    out.input = standardize_with(&pair.input, mask, &params);
    out.target = standardize_with(&pair.target, mask, &params);
    Ok((out, params))
}

/// Training blocks from standardised pairs, with flipped copies if enabled.
pub fn make_blocks(cfg: &RunConfig, pairs: &[TrainingPair]) -> Result<Vec<TrainingPair>> {
    let mut blocks = Vec::new();
    for (k, p) in pairs.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &format!("blocks/{}/{k}", p.subject_id));
        blocks.extend(extract_blocks_with(p, cfg.train.block, cfg.train.n_blocks, seed, cfg.train.min_coverage)?);
    }
    Ok(if cfg.train.flip { augment_flip(&blocks) } else { blocks })
}

/// Trains (or loads) the denoiser named by the config.
pub fn obtain_model(cfg: &RunConfig, channels: usize, blocks: &[TrainingPair]) -> Result<(DenoiserModel, Vec<EpochRecord>, Option<usize>)> {
    if !cfg.train.enabled {
        let path = cfg
            .model
            .load
            .as_ref()
            .ok_or_else(|| Error::Config("training is disabled and no model.load path is set".into()))?;
        let m = load_model(path)?;
        if m.channels() != channels {
            return Err(Error::Shape(format!("loaded model has {} channels, data needs {channels}", m.channels())));
        }
        return Ok((m, Vec::new(), None));
    }
    let model = build_model(channels, cfg.model.width, cfg.model.kernel, derive_seed(cfg.seed, "model"))?;
    let init = cfg.model.init.as_ref().map(load_model).transpose()?;
    let out = train(&model, blocks, &cfg.train_config(), init.as_ref())?;
    log::info!("best epoch {} (val loss {:.6})", out.best_epoch, out.best_val_loss());
    Ok((out.model, out.history, Some(out.best_epoch)))
}

/// DWI channels of a volume paired in order with those of the reference.
fn dwi_pairs(vol: &Volume4D, reference: &Volume4D) -> Result<Vec<(usize, usize)>> {
    let a = vol.scheme().ok_or_else(|| Error::InvalidInput("volume has no scheme".into()))?.dwi_indices();
    let b = reference.scheme().ok_or_else(|| Error::InvalidInput("reference has no scheme".into()))?.dwi_indices();
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} DWIs vs {} in the reference", a.len(), b.len())));
    }
    Ok(a.into_iter().zip(b).collect())
}

fn fit_metrics(vol: &Volume4D, mask: &BrainMask) -> Result<DtiMetrics> {
    let scheme = vol.scheme().ok_or_else(|| Error::InvalidInput("volume has no scheme".into()))?;
    dti_metrics(&fit_tensor(vol, scheme, mask, S0Source::MeanOfB0)?, mask)
}

/// Image metrics on the DWI channels (after rescaling with the raw data's
/// brain statistics) and DTI agreement, per named stage.
pub fn evaluate(subject: &Subject, truth: &Truth, stages: &[(String, &Volume4D)]) -> Result<MetricReport> {
    let mask = &subject.mask;
    let params = StandardizationParams::from_volume(&subject.data, mask)?;
    let truth_scaled = rescale_for_metrics(&truth.clean, &params);
    let truth_dti = match &truth.dti {
        Some(d) => d.clone(),
        None => fit_metrics(&truth.clean, mask)?,
    };
    let m = mask.data();
    let mut out = Vec::with_capacity(stages.len());
    for (name, vol) in stages {
        let pairs = dwi_pairs(vol, &truth.clean)?;
        let q = image_quality(&rescale_for_metrics(vol, &params), &truth_scaled, &pairs, m)?;
        let dti = dti_agreement(&fit_metrics(vol, mask)?, &truth_dti, m)?;
        out.push(StageMetrics::new(name.clone(), q, Some(dti)));
    }
    Ok(MetricReport { subject: "subject".into(), stages: out })
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut timer = Timer(Vec::new());
    let subject = timer.run("volume_io", || load_subject(cfg))?;
    let mask = subject.mask.clone();

    let (plan, pairs) = match cfg.mode {
        Mode::Selfsup => {
            let plan = timer.run("gradient_design", || resolve_plan(cfg, &subject))?;
            log::info!("subset condition numbers {:?}", plan.cond_numbers);
            let pairs = timer.run("selfsup_pipeline", || build_selfsup_pairs(&subject.data, subject.scheme(), &plan, &mask))?;
            (Some(plan), pairs)
        }
        Mode::Supervised => {
            let clean = subject.truth.as_ref().map(|t| &t.clean);
            let pair = timer.run("selfsup_pipeline", || build_supervised_pairs(&subject.data, subject.scheme(), &mask, clean))?;
            (None, vec![pair])
        }
    };

    let (std_pairs, params): (Vec<TrainingPair>, Vec<StandardizationParams>) = timer.run("selfsup_pipeline", || {
        pairs.iter().map(|p| standardize_pair(p, &mask)).collect::<Result<Vec<_>>>().map(|v| v.into_iter().unzip())
    })?;
    let blocks = timer.run("selfsup_pipeline", || if cfg.train.enabled { make_blocks(cfg, &std_pairs) } else { Ok(Vec::new()) })?;
    log::info!("{} training blocks", blocks.len());

    let channels = pairs[0].channels();
    let (model, history, best_epoch) = timer.run("neural_denoiser", || obtain_model(cfg, channels, &blocks))?;

    let tiles = cfg.infer;
    if tiles.tile > 0 && tiles.margin < model.receptive_radius() {
        log::warn!("inference margin {} below receptive radius {}; tiled output will differ from whole-volume output", tiles.margin, model.receptive_radius());
    }
    let subset_outputs = timer.run("neural_denoiser", || {
        std_pairs.iter().zip(&params).map(|(p, prm)| denoise_volume(&model, &p.input, &mask, prm, &tiles)).collect::<Result<Vec<_>>>()
    })?;
    let denoised = timer.run("selfsup_pipeline", || average_denoised(&subset_outputs))?;
    let dti = timer.run("tensor_model", || fit_metrics(&denoised, &mask))?;

    let report = match &subject.truth {
        Some(truth) => Some(timer.run("quality_metrics", || {
            let mut stages: Vec<(String, &Volume4D)> = vec![("raw".into(), &subject.data)];
            let target_name = if cfg.mode == Mode::Selfsup { "target" } else { "supervised_target" };
            stages.push((target_name.into(), &pairs[0].target));
            if subset_outputs.len() > 1 {
                for (k, v) in subset_outputs.iter().enumerate() {
                    stages.push((format!("subset{}", k + 1), v));
                }
            }
            let final_name = if cfg.mode == Mode::Selfsup { "sdndti" } else { "supervised" };
            stages.push((final_name.into(), &denoised));
            evaluate(&subject, truth, &stages)
        })?),
        None => None,
    };

    Ok(PipelineOutput {
        subject,
        plan,
        model,
        history,
        best_epoch,
        params,
        subset_outputs,
        denoised,
        dti,
        report,
        timings: timer.0,
    })
}

/// Scheme of the volumes the network produces in self-supervised mode.
pub fn output_scheme(scheme: &GradientScheme) -> Result<GradientScheme> {
    pair_scheme(scheme)
}

/// Noise-free training pair check used by tests: every channel of every
/// input equals its target.
pub fn max_pair_gap(pairs: &[TrainingPair]) -> f64 {
    pairs
        .iter()
        .flat_map(|p| p.input.data().iter().zip(p.target.data()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}
