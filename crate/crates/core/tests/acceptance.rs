//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines are always shown; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sdndti::config::RunConfig;
use sdndti::gradient_design::*;
use sdndti::io::{load_model, save_model};
use sdndti::nn::*;
use sdndti::pipeline::*;
use sdndti::quality_metrics::*;
use sdndti::tensor_model::*;
use sdndti::{GradientScheme, StandardizationParams, Volume4D};

type Check = (bool, String);

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn c1_direction_optimum() -> Check {
    let t = Instant::now();
    let set = optimize_dsm6(0, 20, 5000);
    let secs = t.elapsed().as_secs_f64();
    let c = condition_number(set.dirs()).unwrap();
    let o = oracle_cond(set.dirs());
    let pass = c <= 1.3228 + 0.008 && (c - o).abs() < 1e-9 && secs < 60.0;
    (pass, format!("cond {c:.7} (oracle {o:.7}) in {secs:.1} s; need <= 1.3308 in < 60 s"))
}

fn c2_subset_selection() -> Check {
    let table = uniform_directions(90, 4, 3000);
    let t = Instant::now();
    let plan = select_subsets_from_fixed(&table, 3, 1.6, 20_000, 9).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mut used = std::collections::HashSet::new();
    let disjoint = plan.subsets.iter().flatten().all(|i| used.insert(*i));
    let conds: Vec<f64> = plan.subsets.iter().map(|s| oracle_cond(table.select(s).dirs())).collect();
    let n = plan.n_candidates.unwrap_or(0);
    let pass = plan.n_subsets() == 3 && disjoint && conds.iter().all(|c| *c < 1.6) && n >= 10 && secs < 120.0;
    (pass, format!("{} subsets, disjoint {disjoint}, oracle conds {conds:.4?}, {n} candidates, {secs:.1} s", plan.n_subsets()))
}

/// Uniform random rotation from a normalised Gaussian quaternion.
fn rotation(r: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q = [0; 4].map(|_| r.random_range(-1.0..1.0));
        let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_spd(r: &mut ChaCha8Rng) -> [f64; 6] {
    let l: [f64; 3] = [0; 3].map(|_| r.random_range(0.1..3.0));
    let q = rotation(r);
    let m = |i: usize, j: usize| (0..3).map(|k| q[i][k] * l[k] * q[j][k]).sum::<f64>();
    [m(0, 0), m(1, 1), m(2, 2), m(0, 1), m(0, 2), m(1, 2)]
}

/// Gaussian elimination with partial pivoting on a 6×6 system.
fn solve6(mut a: [[f64; 6]; 6], mut b: [f64; 6]) -> [f64; 6] {
    for col in 0..6 {
        let p = (col..6).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        b.swap(col, p);
        for row in col + 1..6 {
            let f = a[row][col] / a[col][col];
            for k in col..6 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 6];
    for row in (0..6).rev() {
        let s: f64 = (row + 1..6).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn c3_tensor_exactness() -> Check {
    let mut r = rng(31);
    let (dirs, _) = design_scheme(&dsm6(), 3, 1, 200, DEFAULT_COND_THRESHOLD).unwrap();
    let scheme = GradientScheme::from_directions(1, dirs.dirs(), 1.0).unwrap();
    let dims = [100, 100, 1];
    let n = 10_000;
    let truth: Vec<[f64; 6]> = (0..n).map(|_| random_spd(&mut r)).collect();
    let s0: Vec<f64> = (0..n).map(|_| r.random_range(100.0..2000.0)).collect();
    let mask = sdndti::BrainMask::full(dims);
    let tf = TensorField::new(dims, truth.clone(), vec![0; n]).unwrap();
    let vol = synthesize_dwis(&tf, &s0, &scheme, &mask).unwrap();
    let fit = fit_tensor(&vol, &scheme, &mask, S0Source::MeanOfB0).unwrap();
    let norm = |d: &[f64; 6]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let worst = fit
        .tensors()
        .iter()
        .zip(&truth)
        .map(|(f, t)| norm(&[0, 1, 2, 3, 4, 5].map(|i| f[i] - t[i])) / norm(t))
        .fold(0.0, f64::max);

    // six directions: the fit is A⁻¹ applied to the ADCs
    let six = dsm6();
    let scheme6 = GradientScheme::from_directions(1, six.dirs(), 1.0).unwrap();
    let rows: Vec<[f64; 6]> =
        six.dirs().iter().map(|g| [g[0] * g[0], g[1] * g[1], g[2] * g[2], 2.0 * g[0] * g[1], 2.0 * g[0] * g[2], 2.0 * g[1] * g[2]]).collect();
    let a: [[f64; 6]; 6] = std::array::from_fn(|i| rows[i]);
    let m = 1000;
    let mut data = vec![0.0; m * 7];
    for v in 0..m {
        data[v] = 1.0;
        for j in 0..6 {
            data[(j + 1) * m + v] = (-r.random_range(0.2..2.5f64)).exp();
        }
    }
    let vol6 = Volume4D::new([m, 1, 1, 7], data).unwrap().with_scheme(scheme6.clone()).unwrap();
    let fit6 = fit_tensor(&vol6, &scheme6, &sdndti::BrainMask::full([m, 1, 1]), S0Source::MeanOfB0).unwrap();
    let mut direct = 0.0f64;
    for v in 0..m {
        let c: [f64; 6] = std::array::from_fn(|j| -vol6.volume(j + 1)[v].ln());
        let x = solve6(a, c);
        for i in 0..6 {
            direct = direct.max((x[i] - fit6.tensors()[v][i]).abs());
        }
    }
    (worst < 1e-8 && direct < 1e-12, format!("18-dir roundtrip worst rel {worst:.2e} (< 1e-8); 6-dir vs direct inversion {direct:.2e} (< 1e-12)"))
}

fn c4_synthesis_identity() -> Check {
    let cfg = RunConfig::from_toml("seed = 4\n[phantom]\nshape = [24, 24, 24]\n", &[], None).unwrap();
    let subject = load_subject(&cfg).unwrap();
    let plan = resolve_plan(&cfg, &subject).unwrap();
    let scheme = subject.scheme();
    let pairs = build_selfsup_pairs(&subject.data, scheme, &plan, &subject.mask).unwrap();
    let dwi = scheme.dwi_indices();
    let s0 = mean_b0(&subject.data, scheme).unwrap();
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    for (k, subset) in plan.subsets.iter().enumerate() {
        let idx: Vec<usize> = subset.iter().map(|&j| dwi[j]).collect();
        let sub = subject.data.select_volumes(&idx).unwrap();
        let tf = fit_tensor(&sub, &scheme.select(&idx).unwrap(), &subject.mask, S0Source::Provided(&s0)).unwrap();
        for &j in subset {
            let (got, raw) = (pairs[k].input.volume(j + 1), subject.data.volume(dwi[j]));
            for v in subject.mask.indices() {
                if tf.has_flag(v, flags::CLAMPED_SIGNAL) {
                    skipped += 1;
                    continue;
                }
                worst = worst.max((got[v] - raw[v]).abs() / raw[v].abs().max(1.0));
                checked += 1;
            }
        }
    }
    (checked > 0 && worst <= 1e-10, format!("{checked} voxel-channels, worst rel {worst:.2e} (<= 1e-10), {skipped} flagged skipped"))
}

fn c5_gradients() -> Check {
    let mut worst = [("conv3d", 0.0f64), ("batchnorm", 0.0), ("conv-bn-relu", 0.0), ("masked l1", 0.0)];
    for seed in 0..20 {
        let errs = [fd::conv(seed), fd::batchnorm(seed), fd::relu_composition(seed), fd::masked_l1(seed)];
        for (w, e) in worst.iter_mut().zip(errs) {
            w.1 = w.1.max(e);
        }
    }
    let net = (0..3).map(fd::network).fold(0.0, f64::max);
    let pass = worst.iter().all(|w| w.1 < 1e-3) && net < 1e-3;
    let text: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    (pass, format!("20 shapes each: {}; whole net {net:.1e}", text.join(", ")))
}

fn c6_residual_identity() -> Check {
    let mut r = rng(6);
    let mut all = true;
    let mut n = 0;
    for (c, k, shape) in [(19, 8, [1, 19, 9, 7, 5]), (3, 4, [2, 3, 1, 1, 1]), (5, 6, [1, 5, 12, 3, 8])] {
        let mut m = build_model(c, k, 3, r.random_range(0..1000)).unwrap();
        m.zero_last_layer();
        for scale in [1.0, 1e4] {
            let mut x: Tensor5<f32> = random_tensor(&mut r, shape);
            x.data_mut().iter_mut().for_each(|v| *v *= scale);
            all &= m.forward(&x).unwrap() == x && m.clone().forward_train(&x).unwrap().0 == x;
            n += 1;
        }
    }
    (all, format!("{n} inputs, forward and training-mode outputs bitwise equal to input"))
}

fn c7_parameter_count() -> Check {
    let (c, k, d) = (19usize, 192usize, 3usize);
    let closed = 2 * (c * k * d * d * d) + 4 * (k * k * d * d * d) + 4 * (2 * k * k * d * d * d);
    let model = build_model(c, k, d, 0).unwrap();
    let built = model.conv_weight_count();
    let pass = built == 12_140_928 && closed == built;
    (pass, format!("built {built}, closed form {closed}, expected 12140928"))
}

fn c8_adam() -> Check {
    let mut worst = 0.0f64;
    for lr in [1e-3, 0.1] {
        let reference = adam_reference(1.0, lr, 100);
        let mut theta = vec![1.0f64];
        let mut state = AdamState::new(1);
        let cfg = AdamConfig { learning_rate: lr, ..AdamConfig::default() };
        for t in 1..=100u64 {
            let g = [2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut state, t, &cfg);
            worst = worst.max((theta[0] - reference[t as usize - 1]).abs());
            for &(plr, step, v) in &ADAM_PYTHON {
                if plr == lr && step == t as usize {
                    worst = worst.max((theta[0] - v).abs());
                }
            }
        }
    }
    (worst < 1e-10, format!("100 steps at lr 1e-3 and 0.1, worst deviation {worst:.1e} (< 1e-10)"))
}

/// Output of the desk-scale run shared by criteria 9, 10 and 13.
struct Desk {
    out: PipelineOutput,
    secs: f64,
    epochs: usize,
    model_path: PathBuf,
}

fn run_desk(dir: &Path) -> Desk {
    let cfg = RunConfig::load(workspace_file("configs/desk.toml"), &[]).unwrap();
    let t = Instant::now();
    let out = run_pipeline(&cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let model_path = dir.join("desk.sdnd");
    save_model(&out.model, &model_path).unwrap();
    Desk { out, secs, epochs: cfg.train.epochs, model_path }
}

fn c9_end_to_end(desk: &Desk) -> Check {
    let rep = desk.out.report.as_ref().unwrap();
    let (raw, sd) = (rep.stage("raw").unwrap(), rep.stage("sdndti").unwrap());
    let g = |s: &StageMetrics, k: &str| s.get(k).unwrap();
    let gain = g(sd, "psnr") - g(raw, "psnr");
    let v1 = 1.0 - g(sd, "v1_mad_deg") / g(raw, "v1_mad_deg");
    let fa = 1.0 - g(sd, "fa_mad") / g(raw, "fa_mad");
    let shape = desk.out.subject.data.dims();
    let pass = gain >= 3.0 && v1 >= 0.3 && fa >= 0.3 && desk.secs < 900.0 && desk.epochs <= 60 && shape == [32, 32, 32, 21];
    (
        pass,
        format!(
            "PSNR {:.2} -> {:.2} dB ({gain:+.2}, need >= +3); V1 MAD {:.2} -> {:.2} deg ({:.0}% less, need 30%); FA MAD {:.4} -> {:.4} ({:.0}% less, need 30%); {} epochs, {:.0} s",
            g(raw, "psnr"),
            g(sd, "psnr"),
            g(raw, "v1_mad_deg"),
            g(sd, "v1_mad_deg"),
            100.0 * v1,
            g(raw, "fa_mad"),
            g(sd, "fa_mad"),
            100.0 * fa,
            desk.epochs,
            desk.secs
        ),
    )
}

fn c10_averaging_gain(desk: &Desk) -> Check {
    let rep = desk.out.report.as_ref().unwrap();
    let avg = rep.stage("sdndti").unwrap().get("psnr").unwrap();
    let subsets: Vec<f64> = rep.stages.iter().filter(|s| s.stage.starts_with("subset")).map(|s| s.get("psnr").unwrap()).collect();
    let best = subsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (subsets.len() == 3 && avg >= best, format!("average {avg:.2} dB vs subsets {subsets:.2?}"))
}

fn c11_metric_oracles() -> Check {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let a = vec![0.2, 0.4, 0.6, 0.8];
    let m = [true; 4];
    let plus = |d: f64| a.iter().map(|x| x + d).collect::<Vec<f64>>();
    check("mae a==b", mae(&a, &a, &m).unwrap() == 0.0);
    check("mae +0.01", (mae(&a, &plus(0.01), &m).unwrap() - 0.01).abs() < 1e-12);
    check("psnr mse 0.01", (psnr(&a, &plus(0.1), &m).unwrap() - 20.0).abs() < 1e-9);
    check("psnr a==b", psnr(&a, &a, &m).unwrap() == f64::INFINITY);
    check("scalar mad a==b", scalar_mad(&a, &a, &m).unwrap() == 0.0);
    check("scalar mad +0.02", (scalar_mad(&a, &plus(0.02), &m).unwrap() - 0.02).abs() < 1e-12);

    let p = StandardizationParams { mean: 10.0, std: 2.0 };
    let v = Volume4D::new([4, 1, 1, 1], vec![10.0, 16.0, 20.0, 4.0]).unwrap();
    check("rescale", rescale_for_metrics(&v, &p).data() == [0.5, 1.0, 1.0, 0.0]);

    let x = vec![[1.0, 0.0, 0.0]; 3];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    check("angle identical", angular_mad(&x, &x, &[true; 3]).unwrap() == 0.0);
    check("angle antipodal", angular_mad(&x, &vec![[-1.0, 0.0, 0.0]; 3], &[true; 3]).unwrap() == 0.0);
    check("angle 45", (angular_mad(&x, &vec![[h, h, 0.0]; 3], &[true; 3]).unwrap() - 45.0).abs() < 1e-9);

    let dims = [16, 14, 12];
    let s: Vec<f64> = (0..dims.iter().product::<usize>())
        .map(|i| {
            let (x, y, z) = ((i % 16) as f64, ((i / 16) % 14) as f64, (i / 224) as f64);
            0.5 + 0.4 * ((x * 0.5).sin() * (y * 0.3).cos() + 0.2 * (z * 0.7).sin()) / 1.2
        })
        .collect();
    let full = vec![true; s.len()];
    check("ssim a==b", (ssim(&s, &s, dims, &full).unwrap() - 1.0).abs() < 1e-12);
    let inv: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
    check("ssim inverted", ssim(&s, &inv, dims, &full).unwrap() < 0.5);

    let mut r = rng(11);
    let n = 13 * 13 * 13;
    let fa: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let fb: Vec<f64> = fa.iter().map(|v| 0.7 * v + 0.3 * r.random_range(0.0..1.0)).collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
    let diff = (ssim(&fa, &fb, [13; 3], &mask).unwrap() - naive_ssim(&fa, &fb, [13; 3], &mask)).abs();
    check("ssim naive oracle", diff < 1e-9);
    let detail = if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) };
    (failures.is_empty(), format!("13 examples, 13^3 SSIM vs sliding-window oracle {diff:.1e}{detail}"))
}

const SMALL: &str = "seed = 5\n[phantom]\nshape = [16, 16, 16]\n[model]\nwidth = 4\n[train]\nepochs = 2\nlearning_rate = 1e-3\nblock = [8, 8, 8]\nn_blocks = 2\n";

fn c12_reproducibility(desk: &Desk) -> Check {
    let cfg = RunConfig::from_toml(SMALL, &[], None).unwrap();
    let a = run_pipeline(&cfg).unwrap().report.unwrap().to_json();
    let b = run_pipeline(&cfg).unwrap().report.unwrap().to_json();
    let loaded = load_model(&desk.model_path).unwrap();
    let x: Tensor5<f32> = random_tensor(&mut rng(12), [1, desk.out.model.channels(), 20, 18, 16]);
    let same = desk.out.model.forward(&x).unwrap().data() == loaded.forward(&x).unwrap().data();
    let params = desk.out.model.params().iter().zip(loaded.params()).all(|(p, q)| p == &q);
    (a == b && same && params, format!("report.json identical {}; loaded model forward bitwise {same}, parameters {params}", a == b))
}

fn c13_fine_tuning(desk: &Desk) -> Check {
    // a fresh phantom; the desk model was trained on phantom seed 0
    let base = ["phantom.seed=1", "train.epochs=24"].map(String::from);
    let scratch_cfg = RunConfig::load(workspace_file("configs/desk.toml"), &base).unwrap();
    let subject = load_subject(&scratch_cfg).unwrap();
    let plan = resolve_plan(&scratch_cfg, &subject).unwrap();
    let pairs = build_selfsup_pairs(&subject.data, subject.scheme(), &plan, &subject.mask).unwrap();
    let std_pairs: Vec<TrainingPair> = pairs.iter().map(|p| standardize_pair(p, &subject.mask).unwrap().0).collect();
    let blocks = make_blocks(&scratch_cfg, &std_pairs).unwrap();

    let (_, scratch, best) = obtain_model(&scratch_cfg, 19, &blocks).unwrap();
    let best = best.unwrap();
    let target = scratch[best - 1].val_loss;

    let mut ft = base.to_vec();
    ft[1] = format!("train.epochs={best}");
    ft.push(format!("model.init={:?}", desk.model_path.to_str().unwrap()));
    let ft_cfg = RunConfig::load(workspace_file("configs/desk.toml"), &ft).unwrap();
    let (_, tuned, _) = obtain_model(&ft_cfg, 19, &blocks).unwrap();
    let reached = tuned.iter().find(|h| h.val_loss <= target).map(|h| h.epoch);
    let pass = matches!(reached, Some(e) if e < best);
    let when = reached.map_or("never".to_string(), |e| format!("at epoch {e}"));
    (pass, format!("from scratch best val {target:.4} at epoch {best}; fine-tuned reaches it {when} (first val {:.4})", tuned[0].val_loss))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut desk: Option<Desk> = None;
    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        if !pass {
            failed += 1;
        }
        println!("{} {id:>2} {name}: {detail} [{:.1} s]", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    };
    report(1, "direction optimum", &mut c1_direction_optimum);
    report(2, "subset selection", &mut c2_subset_selection);
    report(3, "tensor exactness", &mut c3_tensor_exactness);
    report(4, "synthesis identity", &mut c4_synthesis_identity);
    report(5, "gradient correctness", &mut c5_gradients);
    report(6, "residual identity", &mut c6_residual_identity);
    report(7, "parameter count", &mut c7_parameter_count);
    report(8, "adam oracle", &mut c8_adam);
    let mut with_desk = |id: u32, name: &str, f: fn(&Desk) -> Check, report: &mut dyn FnMut(u32, &str, &mut dyn FnMut() -> Check)| {
        report(id, name, &mut || {
            if desk.is_none() {
                desk = Some(run_desk(dir.path()));
            }
            f(desk.as_ref().unwrap())
        });
    };
    with_desk(9, "end-to-end desk pipeline", c9_end_to_end, &mut report);
    with_desk(10, "averaging gain", c10_averaging_gain, &mut report);
    report(11, "metric oracles", &mut c11_metric_oracles);
    with_desk(12, "reproducibility", c12_reproducibility, &mut report);
    with_desk(13, "fine-tuning", c13_fine_tuning, &mut report);
    if failed > 0 {
        println!("{failed} of 13 criteria failed");
        std::process::exit(1);
    }
    println!("all 13 criteria passed");
}
