//! Subcommands of the `cgdl` binary.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cgdl::checkpoint::{Checkpoint, TOOL_VERSION};
use cgdl::data::{
    generate_templates, load_idx, make_outliers, write_idx, LabeledImageSet, OutlierKind, SyntheticManifest,
};
use cgdl::detector::Detector;
use cgdl::evaluation::{detector_name, evaluate, export_latents, run_ablation, AblationConfig, EvalReport};
use cgdl::ladder::LadderModel;
use cgdl::trainer::{train, TrainLogEntry};
use cgdl::Error;
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{env_u64, env_var, resolve, EvalCmdConfig, ExportLatentsConfig, GenDataConfig, GenKind, TrainCmdConfig};

#[derive(Debug, Parser)]
#[command(name = "cgdl", version, about = "Open set recognition with conditional Gaussian distribution learning")]
pub struct Cli {
    /// TOML (or .json) file with the command's settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed override; takes precedence over CGDL_SEED and the config file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; takes precedence over CGDL_OUT. Defaults to `out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic or outlier image set as IDX files plus a manifest.
    GenData,
    /// Train a model, calibrate its detector and write a checkpoint.
    Train,
    /// Score a checkpoint on known and unknown test sets.
    Eval,
    /// Run the baseline ablation grid on synthetic data.
    Ablate,
    /// Write latent codes of a data set as CSV.
    ExportLatents,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::ExportLatents => "export-latents",
        }
    }
}

/// Exit status for an error, looked up through its cause chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::NonFinite { .. } | Error::NonFiniteValue { .. } => 4,
                Error::Checkpoint(_) => 5,
                _ => 1,
            };
        }
    }
    1
}

/// Settings shared by all commands after applying overrides.
struct RunContext {
    command: &'static str,
    out: PathBuf,
    notes: Vec<String>,
}

impl RunContext {
    fn preamble(&self, config: &impl Serialize) -> Result<String> {
        Ok(format!(
            "cgdl {TOOL_VERSION} {}\nconfig: {}",
            self.command,
            serde_json::to_string(config)?
        ))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    fn write_json(&self, name: &str, config: &impl Serialize, body: &impl Serialize) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Artifact<'a, C, B> {
            tool_version: &'a str,
            command: &'a str,
            config: &'a C,
            #[serde(flatten)]
            body: &'a B,
        }
        let mut text = serde_json::to_string_pretty(&Artifact {
            tool_version: TOOL_VERSION,
            command: self.command,
            config,
            body,
        })?;
        text.push('\n');
        self.write(name, text)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut notes = Vec::new();
    let out = resolve(
        "out",
        "out".to_string(),
        env_var("CGDL_OUT"),
        cli.out.as_ref().map(|p| p.display().to_string()),
        &mut notes,
    );
    let env_seed = env_u64("CGDL_SEED")?;
    let mut ctx = RunContext {
        command: cli.command.name(),
        out: PathBuf::from(out),
        notes,
    };
    let config_path = cli.config.as_deref();

    match cli.command {
        Command::GenData => {
            let mut cfg: GenDataConfig = config::load(config_path)?;
            cfg.seed = resolve("seed", cfg.seed, env_seed, cli.seed, &mut ctx.notes);
            report_notes(&ctx);
            gen_data(&ctx, &cfg)
        }
        Command::Train => {
            let mut cfg: TrainCmdConfig = config::load(config_path)?;
            cfg.train.seed = resolve("seed", cfg.train.seed, env_seed, cli.seed, &mut ctx.notes);
            report_notes(&ctx);
            train_cmd(&ctx, &cfg)
        }
        Command::Eval => {
            let cfg: EvalCmdConfig = config::load(config_path)?;
            ignore_seed(&mut ctx, env_seed, cli.seed);
            report_notes(&ctx);
            eval_cmd(&ctx, &cfg)
        }
        Command::Ablate => {
            let mut cfg: AblationConfig = config::load(config_path)?;
            let joined = |s: &[u64]| s.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
            let file = joined(&cfg.seeds);
            let pick = resolve(
                "seeds",
                file.clone(),
                env_seed.map(|s| s.to_string()),
                cli.seed.map(|s| s.to_string()),
                &mut ctx.notes,
            );
            if pick != file {
                cfg.seeds = vec![pick.parse().expect("single seed")];
            }
            report_notes(&ctx);
            ablate_cmd(&ctx, &cfg)
        }
        Command::ExportLatents => {
            let cfg: ExportLatentsConfig = config::load(config_path)?;
            ignore_seed(&mut ctx, env_seed, cli.seed);
            report_notes(&ctx);
            export_cmd(&ctx, &cfg)
        }
    }
}

fn ignore_seed(ctx: &mut RunContext, env_seed: Option<u64>, flag: Option<u64>) {
    if env_seed.is_some() || flag.is_some() {
        ctx.notes.push(format!("seed: {} is deterministic and ignores the seed", ctx.command));
    }
}

fn report_notes(ctx: &RunContext) {
    for n in &ctx.notes {
        eprintln!("note: {n}");
    }
}

fn prepare_out(ctx: &RunContext) -> Result<()> {
    fs::create_dir_all(&ctx.out).map_err(|e| Error::Io {
        path: ctx.out.clone(),
        source: e,
    })?;
    Ok(())
}

fn load_pair(pair: &config::IdxPair) -> Result<LabeledImageSet> {
    load_idx(&pair.images, &pair.labels).with_context(|| format!("loading {}", pair.images.display()))
}

#[derive(Serialize)]
struct GenManifest {
    images: usize,
    class_names: Vec<String>,
    class_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticManifest>,
}

fn gen_data(ctx: &RunContext, cfg: &GenDataConfig) -> Result<()> {
    let (set, synthetic) = match cfg.kind {
        GenKind::Templates => {
            if cfg.num_classes == 0 || cfg.per_class == 0 {
                return Err(Error::Config("num_classes and per_class must be positive".into()).into());
            }
            let ids: Vec<usize> = (cfg.first_template..cfg.first_template + cfg.num_classes).collect();
            let set = generate_templates(&ids, cfg.per_class, cfg.image_side, cfg.noise_sigma, cfg.seed)?;
            let manifest = SyntheticManifest::new(&ids, cfg.image_side, cfg.noise_sigma, cfg.seed);
            (set, Some(manifest))
        }
        GenKind::UniformNoise => {
            let kind = OutlierKind::UniformNoise { side: cfg.image_side };
            (make_outliers(&kind, None, cfg.count, cfg.seed)?, None)
        }
        GenKind::NoisedKnown => {
            let base = match (&cfg.base_images, &cfg.base_labels) {
                (Some(images), Some(labels)) => Some(load_pair(&config::IdxPair {
                    images: images.clone(),
                    labels: labels.clone(),
                })?),
                _ => None,
            };
            let kind = OutlierKind::NoisedKnown { scale: cfg.noise_scale };
            (make_outliers(&kind, base.as_ref(), cfg.count, cfg.seed)?, None)
        }
    };
    prepare_out(ctx)?;
    let images = ctx.path(&format!("{}-images.idx", cfg.name));
    let labels = ctx.path(&format!("{}-labels.idx", cfg.name));
    write_idx(&set, &images, &labels)?;
    let manifest = GenManifest {
        images: set.len(),
        class_names: set.class_names.clone(),
        class_counts: set.class_counts(),
        synthetic,
    };
    ctx.write_json(&format!("{}-manifest.json", cfg.name), cfg, &manifest)?;
    println!(
        "wrote {} images of {}x{} in {} classes to {}",
        set.len(),
        set.height,
        set.width,
        set.num_classes(),
        images.display()
    );
    for (name, count) in set.class_names.iter().zip(set.class_counts()) {
        println!("  {name}: {count}");
    }
    Ok(())
}

fn train_cmd(ctx: &RunContext, cfg: &TrainCmdConfig) -> Result<()> {
    let data = load_pair(&cfg.data)?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()).into());
    }
    let resolved = serde_json::to_value(cfg)?;
    let seed = cfg.train.seed;
    let ladder = cfg.model.ladder_config(data.pixels(), data.num_classes(), true);
    let mut model = LadderModel::new(ladder, seed)?;
    prepare_out(ctx)?;

    let mut hook = |epoch: usize, m: &LadderModel| -> cgdl::Result<()> {
        let path = ctx.path(&format!("checkpoint-epoch-{epoch}.json"));
        Checkpoint::new(m, None, resolved.clone(), seed, epoch).save(&path)
    };
    let x = data.features();
    let log = train(&mut model, &x, &data.labels, &cfg.train, Some(&mut hook))?;
    for e in &log {
        println!(
            "epoch {:>4}/{}  loss {:.4}  ce {:.4}  train acc {:.4}",
            e.epoch, cfg.train.epochs, e.loss.total, e.loss.ce, e.closed_set_train_accuracy
        );
    }

    let detector = match Detector::calibrate(&model, &x, &data.labels, cfg.tau_l) {
        Ok(d) => Some(d),
        Err(Error::Calibration(msg)) => {
            eprintln!("warning: detector not calibrated: {msg}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(d) = &detector {
        println!("tau_r = {}  tau_l = {}", d.thresholds.tau_r, d.thresholds.tau_l);
    }
    let ckpt = Checkpoint::new(&model, detector, resolved, seed, log.len());
    let path = ctx.path("checkpoint.json");
    ckpt.save(&path)?;

    let mut csv = comment_lines(&ctx.preamble(cfg)?);
    csv.push_str(TrainLogEntry::CSV_HEADER);
    csv.push('\n');
    for e in &log {
        csv.push_str(&e.csv_row());
        csv.push('\n');
    }
    ctx.write("train_log.csv", csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn comment_lines(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, LadderModel)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

#[derive(Serialize)]
struct EvalArtifact<'a> {
    checkpoint_tool_version: &'a str,
    report: &'a EvalReport,
}

fn eval_cmd(ctx: &RunContext, cfg: &EvalCmdConfig) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&cfg.checkpoint)?;
    let detector = ckpt.detector()?;
    let k = model.config().num_classes;
    let known = load_pair(&cfg.known)?;
    if let Some(&bad) = known.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("known test label {bad} outside the model's {k} classes")).into());
    }
    let mut unknown = Vec::with_capacity(cfg.unknown.len());
    let mut unknown_classes = 0;
    for pair in &cfg.unknown {
        let set = load_pair(pair)?;
        unknown_classes += set.labels.iter().collect::<BTreeSet<_>>().len();
        unknown.push(set);
    }
    let report = evaluate(&model, detector, cfg.detector, &known, &unknown, unknown_classes)?;
    prepare_out(ctx)?;
    ctx.write_json(
        "eval_report.json",
        cfg,
        &EvalArtifact {
            checkpoint_tool_version: &ckpt.tool_version,
            report: &report,
        },
    )?;

    let mut csv = comment_lines(&ctx.preamble(cfg)?);
    csv.push_str("truth");
    for c in 0..k {
        csv.push_str(&format!(",pred_{c}"));
    }
    csv.push_str(",pred_unknown\n");
    for (t, row) in report.confusion.matrix().iter().enumerate() {
        let name = if t == k { "unknown".to_string() } else { t.to_string() };
        csv.push_str(&name);
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    ctx.write("confusion.csv", csv)?;

    println!("detector          {}", detector_name(report.detector));
    println!("known samples     {}", report.known_samples);
    println!("unknown samples   {} ({} classes)", report.unknown_samples, report.unknown_classes);
    println!("openness          {:.4}", report.openness);
    println!("closed-set acc    {:.4}", report.closed_set_accuracy);
    println!("macro F1          {:.4}", report.macro_f1);
    if let Some(r) = report.unknown_rejection_rate {
        println!("unknown rejected  {r:.4}");
    }
    Ok(())
}

fn ablate_cmd(ctx: &RunContext, cfg: &AblationConfig) -> Result<()> {
    let threads = env_u64("CGDL_THREADS")?.map(|t| t as usize);
    let table = run_ablation(cfg, threads)?;
    prepare_out(ctx)?;
    ctx.write("ablation.csv", table.to_csv(&ctx.preamble(cfg)?))?;
    ctx.write_json("ablation.json", cfg, &table)?;
    for r in &table.rows {
        for e in &r.errors {
            eprintln!("cell {} / {} unknown classes failed: {e}", r.variant, r.unknown_classes);
        }
        match (r.mean_f1, r.std_f1) {
            (Some(m), Some(s)) => println!(
                "{:<4} openness {:.3}  F1 {m:.4} ± {s:.4}",
                r.variant, r.openness
            ),
            _ => println!("{:<4} openness {:.3}  F1 missing", r.variant, r.openness),
        }
    }
    if table.succeeded_cells() == 0 {
        anyhow::bail!("no grid cell succeeded");
    }
    Ok(())
}

fn export_cmd(ctx: &RunContext, cfg: &ExportLatentsConfig) -> Result<()> {
    let (_, model) = load_checkpoint(&cfg.checkpoint)?;
    let data = load_pair(&cfg.data)?;
    prepare_out(ctx)?;
    let path = ctx.path(&cfg.file_name);
    export_latents(&model, &data, &path, &ctx.preamble(cfg)?)?;
    println!("wrote {} latent rows to {}", data.len(), path.display());
    Ok(())
}
