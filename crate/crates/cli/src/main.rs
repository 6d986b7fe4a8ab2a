use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sdndti::config::RunConfig;
use sdndti::gradient_design::{
    condition_number, design_scheme, dsm6, electrostatic_energy, optimize_dsm6, select_subsets_from_fixed, DirectionSet,
};
use sdndti::io::{read_gradients_scaled, read_nifti, save_model, write_gradients, write_nifti, NiftiDtype};
use sdndti::nn::write_history_csv;
use sdndti::phantom::make_phantom;
use sdndti::pipeline::{
    build_selfsup_pairs, load_subject, make_blocks, obtain_model, resolve_plan, run_pipeline, standardize_pair,
    PipelineOutput,
};
use sdndti::quality_metrics::{dti_agreement, image_quality, rescale_for_metrics, MetricReport, StageMetrics};
use sdndti::tensor_model::{dti_metrics, fit_tensor, mean_b0, synthesize_dwis, S0Source, TensorField};
use sdndti::volume::{BrainMask, GradientScheme, DEFAULT_B0_THRESHOLD};
use sdndti::{StandardizationParams, Volume4D};

#[derive(Parser)]
#[command(name = "sdndti", version, about = "Self-supervised denoising of diffusion tensor MRI")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Debug logging.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradientArgs {
    #[arg(long)]
    bvals: PathBuf,
    #[arg(long)]
    bvecs: PathBuf,
    /// Multiplies b-values; use 1e-3 for tables in s/mm².
    #[arg(long, default_value_t = 1.0)]
    bval_scale: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Design a K-subset direction scheme, or pick subsets from an existing table.
    Design {
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        subsets: u64,
        /// Rotation draws for the designed scheme, or selection draws with --from-bvecs.
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = sdndti::gradient_design::DEFAULT_COND_THRESHOLD)]
        threshold: f64,
        /// Use the stochastic DSM search instead of the closed-form DSM set.
        #[arg(long)]
        search: bool,
        #[arg(long, default_value_t = 3)]
        n_b0: usize,
        /// ms/μm²
        #[arg(long, default_value_t = 1.0)]
        bval: f64,
        /// Select subsets from this acquired bvecs table instead of designing one.
        #[arg(long)]
        from_bvecs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a phantom subject with ground truth.
    Phantom(ConfigArgs),
    /// Fit tensors and write DTI maps.
    Fit {
        #[arg(long)]
        dwi: PathBuf,
        #[command(flatten)]
        grad: GradientArgs,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesise DWIs from a tensor image.
    Synth {
        /// Six-volume tensor image (Dxx Dyy Dzz Dxy Dxz Dyz).
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        s0: PathBuf,
        #[command(flatten)]
        grad: GradientArgs,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and standardise the training pairs of a subject.
    Prep(ConfigArgs),
    /// Train the denoiser.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fine-tune from these weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Denoise a subject with a trained model.
    Denoise {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare images and/or tensors against a reference.
    Eval {
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        reference: Option<PathBuf>,
        /// Image supplying the standardisation statistics (default: --image).
        #[arg(long)]
        raw: Option<PathBuf>,
        #[arg(long, requires = "truth_tensor")]
        tensor: Option<PathBuf>,
        #[arg(long, requires = "tensor")]
        truth_tensor: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        stage: String,
        /// Report path (default: print to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage end to end.
    Pipeline(ConfigArgs),
}

#[derive(Clone)]
struct Tee(Arc<Mutex<Option<File>>>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = self.0.lock().unwrap().as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()
    }
}

fn init_logging(verbose: bool) -> Tee {
    let tee = Tee(Arc::new(Mutex::new(None)));
    let level = if verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Pipe(Box::new(tee.clone())))
        .format_timestamp_millis()
        .init();
    tee
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p, &args.overrides)?,
        None => RunConfig::from_toml("", &with_phantom_default(&args.overrides), None)?,
    };
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

/// Without a config file the run is a default phantom unless overrides say otherwise.
fn with_phantom_default(overrides: &[String]) -> Vec<String> {
    let names_source = overrides.iter().any(|o| o.starts_with("data.") || o.starts_with("phantom"));
    let mut all = Vec::new();
    if !names_source {
        all.push("phantom.seed=0".to_string());
    }
    all.extend(overrides.iter().cloned());
    all
}

/// Creates the output directory, starts the log file and writes the
/// resolved config and version stamp.
fn prepare_output(cfg: &RunConfig, tee: &Tee) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    *tee.0.lock().unwrap() = Some(File::create(dir.join("sdndti.log"))?);
    std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml())?;
    let versions = serde_json::json!({
        "sdndti": env!("CARGO_PKG_VERSION"),
        "model_format": sdndti::io::MODEL_VERSION,
    });
    std::fs::write(dir.join("versions.json"), serde_json::to_string_pretty(&versions)? + "\n")?;
    Ok(dir)
}

fn read_mask(path: Option<&Path>, dims: [usize; 3]) -> Result<BrainMask> {
    let mask = match path {
        Some(p) => BrainMask::from_volume(&read_nifti(p)?)?,
        None => BrainMask::full(dims),
    };
    mask.check_matches(dims)?;
    Ok(mask)
}

fn read_scheme(g: &GradientArgs) -> Result<GradientScheme> {
    Ok(read_gradients_scaled(&g.bvals, &g.bvecs, DEFAULT_B0_THRESHOLD, g.bval_scale)?)
}

fn write_dti_maps(tf: &TensorField, mask: &BrainMask, s0: Option<&[f64]>, dir: &Path) -> Result<()> {
    let m = dti_metrics(tf, mask)?;
    write_nifti(&tf.to_volume(), dir.join("tensor.nii"), NiftiDtype::Float64)?;
    for (name, vol) in [("fa", m.fa_volume()), ("md", m.md_volume()), ("ad", m.ad_volume()), ("rd", m.rd_volume()), ("v1", m.v1_volume())] {
        write_nifti(&vol, dir.join(format!("{name}.nii")), NiftiDtype::Float32)?;
    }
    if let Some(s0) = s0 {
        write_nifti(&Volume4D::new([tf.dims()[0], tf.dims()[1], tf.dims()[2], 1], s0.to_vec())?, dir.join("s0.nii"), NiftiDtype::Float64)?;
    }
    Ok(())
}

fn cmd_design(
    subsets: usize,
    trials: usize,
    seed: u64,
    threshold: f64,
    search: bool,
    n_b0: usize,
    bval: f64,
    from_bvecs: Option<&Path>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let plan = match from_bvecs {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let rows: Vec<Vec<f64>> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>())
                .collect::<std::result::Result<_, _>>()
                .context("bvecs must be three rows of numbers")?;
            if rows.len() != 3 || rows.iter().any(|r| r.len() != rows[0].len()) {
                bail!("bvecs must be three rows of equal length");
            }
            let dirs: Vec<[f64; 3]> = (0..rows[0].len())
                .map(|j| [rows[0][j], rows[1][j], rows[2][j]])
                .filter(|d| d.iter().any(|v| *v != 0.0))
                .collect();
            let acquired = DirectionSet::normalized(dirs)?;
            let plan = select_subsets_from_fixed(&acquired, subsets, threshold, trials, seed)?;
            log::info!("{} candidate subsets below cond {threshold}", plan.n_candidates.unwrap_or(0));
            plan
        }
        None => {
            let base = if search { optimize_dsm6(seed, 20, 5000) } else { dsm6() };
            log::info!("base set cond {:.7}", condition_number(base.dirs())?);
            let (dirs, plan) = design_scheme(&base, subsets, seed, trials, threshold)?;
            let scheme = GradientScheme::from_directions(n_b0, dirs.dirs(), bval)?;
            write_gradients(&scheme, out.join("bvals"), out.join("bvecs"))?;
            println!("energy {:.6}", electrostatic_energy(dirs.dirs())?);
            plan
        }
    };
    for (k, c) in plan.cond_numbers.iter().enumerate() {
        println!("subset {} cond {c:.7} directions {:?}", k + 1, plan.subsets[k]);
    }
    std::fs::write(out.join("plan.json"), plan.to_json() + "\n")?;
    Ok(())
}

fn cmd_phantom(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let Some(p) = &cfg.phantom else { bail!("the phantom command needs a [phantom] section") };
    let subject = load_subject(cfg)?;
    let scene = make_phantom(p.shape, p.seed, &p.spec)?;
    write_nifti(&subject.data, dir.join("dwi.nii"), NiftiDtype::Float64)?;
    write_gradients(subject.scheme(), dir.join("bvals"), dir.join("bvecs"))?;
    write_nifti(&subject.mask.to_volume(), dir.join("mask.nii"), NiftiDtype::Float32)?;
    if let Some(t) = &subject.truth {
        write_nifti(&t.clean, dir.join("clean.nii"), NiftiDtype::Float64)?;
    }
    let truth = dir.join("truth");
    std::fs::create_dir_all(&truth)?;
    write_dti_maps(&scene.tensor_field, &scene.mask, Some(&scene.s0), &truth)?;
    if let Some(plan) = &subject.plan {
        std::fs::write(dir.join("plan.json"), plan.to_json() + "\n")?;
    }
    log::info!("phantom written to {}", dir.display());
    Ok(())
}

fn cmd_fit(dwi: &Path, grad: &GradientArgs, mask: Option<&Path>, out: &Path) -> Result<()> {
    let scheme = read_scheme(grad)?;
    let vol = read_nifti(dwi)?.with_scheme(scheme.clone())?;
    let mask = read_mask(mask, vol.spatial_dims())?;
    let tf = fit_tensor(&vol, &scheme, &mask, S0Source::MeanOfB0)?;
    std::fs::create_dir_all(out)?;
    write_dti_maps(&tf, &mask, Some(&mean_b0(&vol, &scheme)?), out)?;
    let flagged = tf.flags().iter().filter(|&&f| f & sdndti::tensor_model::flags::CLAMPED_SIGNAL != 0).count();
    log::info!("fitted {} voxels, {flagged} with clamped signal", mask.count());
    Ok(())
}

fn cmd_synth(tensor: &Path, s0: &Path, grad: &GradientArgs, mask: Option<&Path>, out: &Path) -> Result<()> {
    let tf = TensorField::from_volume(&read_nifti(tensor)?)?;
    let s0 = read_nifti(s0)?;
    if s0.spatial_dims() != tf.dims() || s0.n_volumes() != 1 {
        bail!("s0 image {:?} does not match tensor grid {:?}", s0.dims(), tf.dims());
    }
    let mask = read_mask(mask, tf.dims())?;
    let vol = synthesize_dwis(&tf, s0.data(), &read_scheme(grad)?, &mask)?;
    write_nifti(&vol, out, NiftiDtype::Float64)?;
    Ok(())
}

fn cmd_prep(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let subject = load_subject(cfg)?;
    let plan = resolve_plan(cfg, &subject)?;
    let pairs = build_selfsup_pairs(&subject.data, subject.scheme(), &plan, &subject.mask)?;
    let mut params: Vec<StandardizationParams> = Vec::new();
    let mut std_pairs = Vec::new();
    for (k, p) in pairs.iter().enumerate() {
        let (s, prm) = standardize_pair(p, &subject.mask)?;
        write_nifti(&s.input, dir.join(format!("input{}.nii", k + 1)), NiftiDtype::Float32)?;
        if k == 0 {
            write_nifti(&s.target, dir.join("target.nii"), NiftiDtype::Float32)?;
        }
        params.push(prm);
        std_pairs.push(s);
    }
    let blocks = make_blocks(cfg, &std_pairs)?;
    std::fs::write(dir.join("plan.json"), plan.to_json() + "\n")?;
    let summary = serde_json::json!({ "pairs": pairs.len(), "channels": pairs[0].channels(), "blocks": blocks.len(), "standardization": params });
    std::fs::write(dir.join("prep.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    log::info!("{} pairs of {} channels, {} training blocks", pairs.len(), pairs[0].channels(), blocks.len());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let subject = load_subject(cfg)?;
    let plan = resolve_plan(cfg, &subject)?;
    let pairs = build_selfsup_pairs(&subject.data, subject.scheme(), &plan, &subject.mask)?;
    let std_pairs = pairs.iter().map(|p| standardize_pair(p, &subject.mask).map(|(s, _)| s)).collect::<sdndti::Result<Vec<_>>>()?;
    let blocks = make_blocks(cfg, &std_pairs)?;
    let (model, history, best) = obtain_model(cfg, pairs[0].channels(), &blocks).map_err(|e| e.in_stage("neural_denoiser"))?;
    save_model(&model, dir.join("model.sdnd"))?;
    write_history_csv(&history, dir.join("history.csv"))?;
    let best = best.expect("training ran");
    let summary = serde_json::json!({ "best_epoch": best, "best_val_loss": history[best - 1].val_loss, "epochs": history.len() });
    std::fs::write(dir.join("train.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("best epoch {best} val loss {:.6}", history[best - 1].val_loss);
    Ok(())
}

fn write_pipeline_outputs(out: &PipelineOutput, dir: &Path) -> Result<()> {
    if let Some(plan) = &out.plan {
        std::fs::write(dir.join("plan.json"), plan.to_json() + "\n")?;
    }
    save_model(&out.model, dir.join("model.sdnd"))?;
    if !out.history.is_empty() {
        write_history_csv(&out.history, dir.join("history.csv"))?;
    }
    write_nifti(&out.denoised, dir.join("denoised.nii"), NiftiDtype::Float32)?;
    if let Some(s) = out.denoised.scheme() {
        write_gradients(s, dir.join("denoised.bval"), dir.join("denoised.bvec"))?;
    }
    if out.subset_outputs.len() > 1 {
        for (k, v) in out.subset_outputs.iter().enumerate() {
            write_nifti(v, dir.join(format!("subset{}.nii", k + 1)), NiftiDtype::Float32)?;
        }
    }
    for (name, vol) in [("fa", out.dti.fa_volume()), ("md", out.dti.md_volume()), ("ad", out.dti.ad_volume()), ("rd", out.dti.rd_volume()), ("v1", out.dti.v1_volume())] {
        write_nifti(&vol, dir.join(format!("{name}.nii")), NiftiDtype::Float32)?;
    }
    if let Some(r) = &out.report {
        std::fs::write(dir.join("report.json"), r.to_json() + "\n")?;
        std::fs::write(dir.join("report.txt"), r.to_table())?;
        print!("{}", r.to_table());
    }
    let timings: serde_json::Map<String, serde_json::Value> = out
        .timings
        .iter()
        .enumerate()
        .map(|(i, (stage, secs))| (format!("{i:02}_{stage}"), serde_json::json!(secs)))
        .collect();
    std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
    Ok(())
}

fn cmd_eval(
    mask: Option<&Path>,
    image: Option<&Path>,
    reference: Option<&Path>,
    raw: Option<&Path>,
    tensor: Option<&Path>,
    truth_tensor: Option<&Path>,
    stage: &str,
    out: Option<&Path>,
) -> Result<()> {
    if image.is_none() && tensor.is_none() {
        bail!("nothing to evaluate: give --image/--reference and/or --tensor/--truth-tensor");
    }
    let mut per_volume = Vec::new();
    let mut dims = None;
    let mut mask_vol: Option<BrainMask> = None;
    if let (Some(a), Some(b)) = (image, reference) {
        let (a, b) = (read_nifti(a)?, read_nifti(b)?);
        if a.dims() != b.dims() {
            bail!("image {:?} and reference {:?} differ in shape", a.dims(), b.dims());
        }
        let m = read_mask(mask, a.spatial_dims())?;
        let raw = match raw {
            Some(p) => read_nifti(p)?,
            None => a.clone(),
        };
        let params = StandardizationParams::from_volume(&raw, &m)?;
        let pairs: Vec<(usize, usize)> = (0..a.n_volumes()).map(|i| (i, i)).collect();
        per_volume = image_quality(&rescale_for_metrics(&a, &params), &rescale_for_metrics(&b, &params), &pairs, m.data())?;
        dims = Some(a.spatial_dims());
        mask_vol = Some(m);
    }
    let mut dti = None;
    if let (Some(t), Some(tt)) = (tensor, truth_tensor) {
        let (t, tt) = (TensorField::from_volume(&read_nifti(t)?)?, TensorField::from_volume(&read_nifti(tt)?)?);
        if t.dims() != tt.dims() || dims.is_some_and(|d| d != t.dims()) {
            bail!("tensor grids differ: {:?} vs {:?}", t.dims(), tt.dims());
        }
        let m = match mask_vol {
            Some(m) => m,
            None => read_mask(mask, t.dims())?,
        };
        dti = Some(dti_agreement(&dti_metrics(&t, &m)?, &dti_metrics(&tt, &m)?, m.data())?);
    }
    let report = MetricReport { subject: "subject".into(), stages: vec![StageMetrics::new(stage, per_volume, dti)] };
    match out {
        Some(p) => {
            std::fs::write(p, report.to_json() + "\n")?;
            print!("{}", report.to_table());
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn run(cli: Cli, tee: Tee) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("setting up the thread pool")?;
    }
    let start = Instant::now();
    match cli.cmd {
        Cmd::Design { subsets, trials, seed, threshold, search, n_b0, bval, from_bvecs, out } => {
            cmd_design(subsets as usize, trials, seed, threshold, search, n_b0, bval, from_bvecs.as_deref(), &out)?
        }
        Cmd::Phantom(args) => {
            let cfg = load_config(&args)?;
            let dir = prepare_output(&cfg, &tee)?;
            cmd_phantom(&cfg, &dir)?
        }
        Cmd::Fit { dwi, grad, mask, out } => cmd_fit(&dwi, &grad, mask.as_deref(), &out)?,
        Cmd::Synth { tensor, s0, grad, mask, out } => cmd_synth(&tensor, &s0, &grad, mask.as_deref(), &out)?,
        Cmd::Prep(args) => {
            let cfg = load_config(&args)?;
            let dir = prepare_output(&cfg, &tee)?;
            cmd_prep(&cfg, &dir)?
        }
        Cmd::Train { cfg: args, init } => {
            let mut cfg = load_config(&args)?;
            cfg.train.enabled = true;
            if init.is_some() {
                cfg.model.init = init;
            }
            let dir = prepare_output(&cfg, &tee)?;
            cmd_train(&cfg, &dir)?
        }
        Cmd::Denoise { cfg: args, model } => {
            let mut cfg = load_config(&args)?;
            cfg.train.enabled = false;
            cfg.model.load = Some(model);
            let dir = prepare_output(&cfg, &tee)?;
            write_pipeline_outputs(&run_pipeline(&cfg)?, &dir)?
        }
        Cmd::Eval { mask, image, reference, raw, tensor, truth_tensor, stage, out } => cmd_eval(
            mask.as_deref(),
            image.as_deref(),
            reference.as_deref(),
            raw.as_deref(),
            tensor.as_deref(),
            truth_tensor.as_deref(),
            &stage,
            out.as_deref(),
        )?,
        Cmd::Pipeline(args) => {
            let cfg = load_config(&args)?;
            let dir = prepare_output(&cfg, &tee)?;
            write_pipeline_outputs(&run_pipeline(&cfg)?, &dir)?
        }
    }
    log::info!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let tee = init_logging(cli.verbose);
    match run(cli, tee) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
