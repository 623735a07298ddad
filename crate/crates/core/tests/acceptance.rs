//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for each
//! and exits nonzero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cgdl::detector::{calibrate_tau_r, membership_probability, ClassGaussian, DetectorKind, Verdict};
use cgdl::evaluation::{
    evaluate, openness, run_ablation, train_profile, AblationConfig, AblationTable, ModelSpec, SyntheticSpec,
    SyntheticSplit, TrainingProfile,
};
use cgdl::ladder::{LadderConfig, LadderModel, LayerStats, Mode};
use cgdl::numerics::{SeededRng, Tape, Tensor};
use cgdl::objective::{kl_conditional, kl_gaussian_pair, total_loss_vars, LossWeights};
use cgdl::trainer::TrainConfig;
use cgdl::detector::Detector;

type Check = std::result::Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];

fn synthetic_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_known: 4,
        train_per_class: 500,
        test_per_class: 100,
        unknown_per_class: 100,
        noise_images: 200,
        image_side: 8,
        noise_sigma: 0.1,
    }
}

fn model_spec() -> ModelSpec {
    ModelSpec {
        layer_dims: vec![64, 32],
        latent_dim: 8,
        prelu_init: 0.25,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        learning_rate: 0.001,
        batch_size: 64,
        lambda: 100.0,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------- criterion 1

fn toy_loss(model: &LadderModel, x: &Tensor, labels: &[usize], grads: bool) -> (f64, Option<Vec<Vec<f64>>>) {
    let weights = LossWeights {
        beta: 0.8,
        lambda: 100.0,
        recon_weight: 1.0,
    };
    let mut rng = SeededRng::new(42);
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, x, &mut Mode::Train(&mut rng), grads).unwrap();
    let xv = tape.constant(x.clone());
    let (loss, _) = total_loss_vars(&mut tape, model, &trace, xv, labels, weights, grads).unwrap();
    let value = tape.value(loss).data()[0];
    if !grads {
        return (value, None);
    }
    let mut store = model.params().clone();
    store.zero_grad();
    tape.backward(loss, &mut store).unwrap();
    (value, Some(store.grads().to_vec()))
}

fn criterion_1() -> Check {
    let mut model = LadderModel::new(LadderConfig::new(16, vec![12, 8], 4, 3), 3).unwrap();
    let mut rng = SeededRng::new(5);
    let x = Tensor::new(vec![5, 16], (0..80).map(|_| rng.uniform()).collect()).unwrap();
    let labels = [0, 1, 2, 1, 0];
    let (_, analytic) = toy_loss(&model, &x, &labels, true);
    let analytic = analytic.unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    for (slot, slot_grads) in analytic.iter().enumerate() {
        for (i, &g) in slot_grads.iter().enumerate() {
            let orig = model.params().value(slot).data()[i];
            model.params_mut().value_mut(slot).data_mut()[i] = orig + h;
            let (up, _) = toy_loss(&model, &x, &labels, false);
            model.params_mut().value_mut(slot).data_mut()[i] = orig - h;
            let (down, _) = toy_loss(&model, &x, &labels, false);
            model.params_mut().value_mut(slot).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{i}] analytic {g:.6e} fd {fd:.6e}", model.params().name(slot));
            }
            checked += 1;
        }
    }
    let msg = format!("{checked} parameters, worst rel err {worst:.2e} at {worst_at}");
    if worst < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- criterion 2

const MC_SAMPLES: usize = 1_000_000;

/// Mean and standard error of `f` over draws of standard normal vectors.
fn monte_carlo(rng: &mut SeededRng, dim: usize, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut eps = vec![0.0; dim];
    for _ in 0..MC_SAMPLES {
        eps.iter_mut().for_each(|e| *e = rng.normal());
        let v = f(&eps);
        sum += v;
        sum_sq += v * v;
    }
    let n = MC_SAMPLES as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn criterion_2() -> Check {
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    let mut fails = Vec::new();
    for inst in 0..20 {
        let j = 1 + inst % 5;
        let mu: Vec<f64> = (0..j).map(|_| rng.normal()).collect();
        let var: Vec<f64> = (0..j).map(|_| rng.uniform_range(0.2, 3.0)).collect();
        let mu_k: Vec<f64> = (0..j).map(|_| rng.normal()).collect();
        let t = |v: &[f64]| Tensor::new(vec![1, j], v.to_vec()).unwrap();
        let exact = kl_conditional(&t(&mu), &t(&var), &t(&mu_k)).unwrap();
        // log q(z) − log p(z) with z ~ q; constants cancel
        let (mean, se) = monte_carlo(&mut rng.split(inst as u64), j, |eps| {
            (0..j)
                .map(|d| {
                    let z = mu[d] + var[d].sqrt() * eps[d];
                    -0.5 * var[d].ln() - 0.5 * eps[d] * eps[d] + 0.5 * (z - mu_k[d]).powi(2)
                })
                .sum()
        });
        let score = (mean - exact).abs() / se;
        worst = worst.max(score);
        if score >= 3.0 {
            fails.push(format!("kl_conditional instance {inst}: exact {exact:.5} mc {mean:.5} ± {se:.5}"));
        }
    }
    for inst in 0..20 {
        let j = 1 + inst % 5;
        let draw = |rng: &mut SeededRng| -> (Vec<f64>, Vec<f64>) {
            (
                (0..j).map(|_| rng.normal()).collect(),
                (0..j).map(|_| rng.uniform_range(0.3, 2.5)).collect(),
            )
        };
        let (pm, pv) = draw(&mut rng);
        let (qm, qv) = draw(&mut rng);
        let t = |v: &[f64]| Tensor::new(vec![1, j], v.to_vec()).unwrap();
        let exact = kl_gaussian_pair(
            &LayerStats::new(t(&pm), t(&pv)).unwrap(),
            &LayerStats::new(t(&qm), t(&qv)).unwrap(),
        )
        .unwrap();
        let (mean, se) = monte_carlo(&mut rng.split(100 + inst as u64), j, |eps| {
            (0..j)
                .map(|d| {
                    let z = pm[d] + pv[d].sqrt() * eps[d];
                    -0.5 * pv[d].ln() - 0.5 * eps[d] * eps[d] + 0.5 * qv[d].ln() + (z - qm[d]).powi(2) / (2.0 * qv[d])
                })
                .sum()
        });
        let score = (mean - exact).abs() / se;
        worst = worst.max(score);
        if score >= 3.0 {
            fails.push(format!("kl_gaussian_pair instance {inst}: exact {exact:.5} mc {mean:.5} ± {se:.5}"));
        }
    }
    if fails.is_empty() {
        Ok(format!("40 instances, largest deviation {worst:.2} standard errors"))
    } else {
        Err(fails.join("; "))
    }
}

// ---------------------------------------------------------------- criterion 3

/// Mass of N(0, 1) on [-a, a] by composite Simpson's rule.
fn simpson_mass(a: f64) -> f64 {
    let n = 4000;
    let h = 2.0 * a / n as f64;
    let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(-a) + pdf(a);
    for i in 1..n {
        let u = -a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(u);
    }
    s * h / 3.0
}

fn criterion_3() -> Check {
    let mut rng = SeededRng::new(77);
    let mut worst = 0.0f64;
    let mut draws = 0;
    for j in [1usize, 2, 5] {
        for _ in 0..100 {
            let m: Vec<f64> = (0..j).map(|_| 2.0 * rng.normal()).collect();
            let var: Vec<f64> = (0..j).map(|_| rng.uniform_range(0.1, 4.0)).collect();
            let z: Vec<f64> = (0..j).map(|d| m[d] + 1.5 * var[d].sqrt() * rng.normal()).collect();
            let g = ClassGaussian {
                class_id: 0,
                m: m.clone(),
                var: var.clone(),
                count: 2,
            };
            let inside: f64 = (0..j).map(|d| simpson_mass((z[d] - m[d]).abs() / var[d].sqrt())).product();
            worst = worst.max((membership_probability(&z, &g) - (1.0 - inside)).abs());
            if membership_probability(&m, &g) != 1.0 {
                return Err(format!("membership at the mean is {}", membership_probability(&m, &g)));
            }
            draws += 1;
        }
    }
    let msg = format!("{draws} draws, max |P - quadrature| = {worst:.2e}; P(m) = 1 exactly");
    if worst < 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Check {
    let lo = openness(15, 30, 15).map_err(|e| e.to_string())?;
    let hi = openness(15, 100, 15).map_err(|e| e.to_string())?;
    let msg = format!("openness(15,30,15) = {lo:.4}, openness(15,100,15) = {hi:.4}");
    if (lo * 100.0).round() == 18.0 && (hi * 100.0).round() == 49.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- criteria 5, 8, 9

struct SeedRun {
    seed: u64,
    data: SyntheticSplit,
    model: LadderModel,
    detector: Detector,
}

fn train_runs() -> cgdl::Result<(Vec<SeedRun>, f64)> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let data = synthetic_spec().generate(seed, 2)?;
        let (model, detector) =
            train_profile(&data.train, &model_spec(), &train_config(), TrainingProfile::Ladder, seed, 0.5)?;
        runs.push(SeedRun {
            seed,
            data,
            model,
            detector,
        });
    }
    Ok((runs, start.elapsed().as_secs_f64()))
}

fn criterion_5(runs: &[SeedRun], train_secs: f64) -> Check {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for r in runs {
        let report = evaluate(
            &r.model,
            &r.detector,
            DetectorKind::CgdAndRe,
            &r.data.test_known,
            &[r.data.unseen.clone(), r.data.noise.clone()],
            2,
        )
        .map_err(|e| e.to_string())?;
        let noise = r.model.infer(&r.data.noise.features()).map_err(|e| e.to_string())?;
        let rejected = r
            .detector
            .decide_all(DetectorKind::CgdAndRe, &noise)
            .iter()
            .filter(|d| d.verdict == Verdict::Unknown)
            .count() as f64
            / noise.len() as f64;
        let pass = report.closed_set_accuracy >= 0.98 && report.macro_f1 >= 0.85 && rejected >= 0.95;
        ok &= pass;
        lines.push(format!(
            "seed {}: acc {:.4} F1 {:.4} noise rejected {:.4}",
            r.seed, report.closed_set_accuracy, report.macro_f1, rejected
        ));
    }
    let total = train_secs + start.elapsed().as_secs_f64();
    ok &= total < 15.0 * 60.0;
    let msg = format!("{}; {:.0}s", lines.join("; "), total);
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_8(runs: &[SeedRun]) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for r in runs {
        let x = r.data.train.features();
        let tau_r = calibrate_tau_r(&r.model, &x).map_err(|e| e.to_string())?;
        let errors = r.model.infer(&x).map_err(|e| e.to_string())?.recon_error;
        let n = errors.len() as f64;
        let frac = errors.iter().filter(|&&e| e <= tau_r).count() as f64 / n;
        ok &= frac >= 0.95 && frac <= 0.95 + 1.0 / n;
        lines.push(format!("seed {}: {frac:.4} of {n} at or below tau_r", r.seed));
    }
    let msg = lines.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn criterion_9(runs: &[SeedRun]) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for r in runs {
        let inf = r.model.infer(&r.data.test_known.features()).map_err(|e| e.to_string())?;
        let k = r.data.test_known.num_classes();
        let j = inf.z.shape()[1];
        let members: Vec<Vec<usize>> = (0..k)
            .map(|c| (0..inf.len()).filter(|&i| r.data.test_known.labels[i] == c).collect())
            .collect();
        let centroids: Vec<Vec<f64>> = members
            .iter()
            .map(|rows| {
                let mut c = vec![0.0; j];
                for &i in rows {
                    c.iter_mut().zip(inf.z.row(i)).for_each(|(a, b)| *a += b / rows.len() as f64);
                }
                c
            })
            .collect();
        let intra: Vec<f64> = (0..k)
            .map(|c| members[c].iter().map(|&i| dist(inf.z.row(i), &centroids[c])).sum::<f64>() / members[c].len() as f64)
            .collect();
        let mut margin = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let inter = dist(&centroids[a], &centroids[b]);
                margin = margin.min(inter / intra[a].max(intra[b]));
            }
        }
        ok &= margin > 1.0;
        lines.push(format!("seed {}: min inter/intra ratio {margin:.2}", r.seed));
    }
    let msg = lines.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- criteria 6, 7

const ABLATION_UNKNOWNS: [usize; 4] = [1, 2, 4, 8];

fn ablation() -> cgdl::Result<AblationTable> {
    let config = AblationConfig {
        data: SyntheticSpec {
            noise_images: 0,
            ..synthetic_spec()
        },
        model: model_spec(),
        train: train_config(),
        variants: ["I", "IV", "V", "VI", "VII"].iter().map(|s| s.to_string()).collect(),
        unknown_class_counts: ABLATION_UNKNOWNS.to_vec(),
        seeds: SEEDS.to_vec(),
        tau_l: 0.5,
    };
    run_ablation(&config, None)
}

fn criterion_6(table: &AblationTable) -> Check {
    let u = ABLATION_UNKNOWNS[0];
    let (cgdl, plain) = match (table.row("VII", u), table.row("I", u)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err("missing ablation rows".into()),
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, seed) in SEEDS.iter().enumerate() {
        match (cgdl.per_seed_accuracy[i], plain.per_seed_accuracy[i]) {
            (Some(a), Some(b)) => {
                ok &= (a - b).abs() <= 0.02;
                lines.push(format!("seed {seed}: CGDL {a:.4} vs plain {b:.4}"));
            }
            _ => {
                ok = false;
                lines.push(format!("seed {seed}: run failed"));
            }
        }
    }
    let msg = lines.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7(table: &AblationTable) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for u in ABLATION_UNKNOWNS {
        let f1 = |v: &str| table.row(v, u).and_then(|r| r.mean_f1);
        let (Some(iv), Some(v), Some(vi), Some(vii)) = (f1("IV"), f1("V"), f1("VI"), f1("VII")) else {
            return Err(format!("missing cells at {u} unknown classes"));
        };
        ok &= vii >= vi && v >= iv;
        let open = table.row("VII", u).map_or(0.0, |r| r.openness);
        lines.push(format!(
            "openness {open:.3}: VII {vii:.4} VI {vi:.4} V {v:.4} IV {iv:.4}"
        ));
    }
    let msg = lines.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- criterion 10

fn cgdl_bin(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cgdl"))
        .args(args)
        .current_dir(dir)
        .env_remove("CGDL_SEED")
        .env_remove("CGDL_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("cgdl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let read = |p: &str| fs::read(d.join(p)).map_err(|e| format!("{p}: {e}"));
    fs::write(d.join("test.toml"), "name = \"test\"\nper_class = 50\nseed = 11\n").map_err(|e| e.to_string())?;
    fs::write(d.join("noise.toml"), "name = \"noise\"\nkind = \"uniform_noise\"\ncount = 50\n")
        .map_err(|e| e.to_string())?;
    fs::write(
        d.join("train.toml"),
        "[model]\nlatent_dim = 8\n[train]\nepochs = 10\nseed = 3\n",
    )
    .map_err(|e| e.to_string())?;
    fs::write(
        d.join("eval.toml"),
        "[[unknown]]\nimages = \"out/noise-images.idx\"\nlabels = \"out/noise-labels.idx\"\n",
    )
    .map_err(|e| e.to_string())?;
    cgdl_bin(d, &["gen-data"])?;
    cgdl_bin(d, &["gen-data", "--config", "test.toml"])?;
    cgdl_bin(d, &["gen-data", "--config", "noise.toml"])?;
    cgdl_bin(d, &["train", "--config", "train.toml"])?;
    let first = read("out/checkpoint.json")?;
    cgdl_bin(d, &["train", "--config", "train.toml", "--out", "again"])?;
    let second = read("again/checkpoint.json")?;
    cgdl_bin(d, &["eval", "--config", "eval.toml", "--out", "e1"])?;
    cgdl_bin(d, &["eval", "--config", "eval.toml", "--out", "e2"])?;
    let same_ckpt = first == second;
    let same_eval = read("e1/eval_report.json")? == read("e2/eval_report.json")?
        && read("e1/confusion.csv")? == read("e2/confusion.csv")?;
    let msg = format!(
        "checkpoints identical: {same_ckpt} ({} bytes); eval reports identical: {same_eval}",
        first.len()
    );
    if same_ckpt && same_eval {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- driver

struct Outcome {
    id: u8,
    name: &'static str,
    result: Check,
    secs: f64,
}

fn run(id: u8, name: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id:>2} {tag} {name}: {detail} [{secs:.1}s]");
    Outcome { id, name, result, secs }
}

fn with_limit(limit_secs: f64, f: impl FnOnce() -> Check) -> impl FnOnce() -> Check {
    move || {
        let start = Instant::now();
        let r = f()?;
        let secs = start.elapsed().as_secs_f64();
        if secs < limit_secs {
            Ok(r)
        } else {
            Err(format!("{r}; took {secs:.0}s, limit {limit_secs:.0}s"))
        }
    }
}

fn main() {
    // honour `cargo test -- --list` and name filters from the libtest CLI
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }

    println!("running acceptance criteria");
    let mut outcomes = vec![
        run(1, "gradient integrity", with_limit(60.0, criterion_1)),
        run(2, "KL correctness", with_limit(120.0, criterion_2)),
        run(3, "membership probability oracle", criterion_3),
        run(4, "openness endpoints", criterion_4),
    ];

    let trained = train_runs();
    match &trained {
        Ok((runs, secs)) => {
            outcomes.push(run(5, "end-to-end synthetic open set recognition", || criterion_5(runs, *secs)));
        }
        Err(e) => {
            let msg = format!("training failed: {e}");
            outcomes.push(run(5, "end-to-end synthetic open set recognition", || Err(msg)));
        }
    }

    match ablation() {
        Ok(table) => {
            outcomes.push(run(6, "closed-set parity with the plain classifier", || criterion_6(&table)));
            outcomes.push(run(7, "ablation ordering", || criterion_7(&table)));
        }
        Err(e) => {
            let msg = format!("ablation failed: {e}");
            outcomes.push(run(6, "closed-set parity with the plain classifier", || Err(msg.clone())));
            outcomes.push(run(7, "ablation ordering", || Err(msg)));
        }
    }

    match &trained {
        Ok((runs, _)) => {
            outcomes.push(run(8, "reconstruction threshold calibration", || criterion_8(runs)));
            outcomes.push(run(9, "latent class structure", || criterion_9(runs)));
        }
        Err(e) => {
            let msg = format!("training failed: {e}");
            outcomes.push(run(8, "reconstruction threshold calibration", || Err(msg.clone())));
            outcomes.push(run(9, "latent class structure", || Err(msg)));
        }
    }
    outcomes.push(run(10, "determinism", criterion_10));

    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| o.result.is_err()).collect();
    let total: f64 = outcomes.iter().map(|o| o.secs).sum();
    println!(
        "acceptance: {} passed, {} failed ({total:.0}s in criterion bodies)",
        outcomes.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        for o in &failed {
            println!("  failed: criterion {} {}", o.id, o.name);
        }
        std::process::exit(1);
    }
}
