//! Per-command configuration records and override resolution.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use cgdl::detector::DetectorKind;
use cgdl::evaluation::ModelSpec;
use cgdl::trainer::TrainConfig;
use cgdl::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads a TOML file, or JSON when the extension is `.json`. No file means
/// all defaults.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Where a setting's final value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    File,
    Env,
    Flag,
}

impl Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::File => "config file",
            Source::Env => "environment",
            Source::Flag => "command-line flag",
        })
    }
}

/// Applies `file < env < flag` precedence. Every time a later source
/// replaces a different earlier value, a note is pushed to `notes`.
pub fn resolve<T: PartialEq + Display + Clone>(
    name: &str,
    file: T,
    env: Option<T>,
    flag: Option<T>,
    notes: &mut Vec<String>,
) -> T {
    let mut value = file;
    let mut from = Source::File;
    for (candidate, source) in [(env, Source::Env), (flag, Source::Flag)] {
        if let Some(v) = candidate {
            if v != value {
                notes.push(format!("{name}: {source} value {v} overrides {from} value {value}"));
            }
            value = v;
            from = source;
        }
    }
    value
}

pub fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

pub fn env_u64(name: &str) -> Result<Option<u64>, Error> {
    env_var(name)
        .map(|v| v.parse().map_err(|_| Error::Config(format!("{name}={v:?} is not a nonnegative integer"))))
        .transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    Templates,
    UniformNoise,
    NoisedKnown,
}

fn d_name() -> String {
    "train".into()
}
fn d_classes() -> usize {
    4
}
fn d_per_class() -> usize {
    100
}
fn d_side() -> usize {
    8
}
fn d_sigma() -> f64 {
    0.1
}
fn d_scale() -> f64 {
    cgdl::data::NOISED_KNOWN_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    /// File stem: writes `<name>-images.idx`, `<name>-labels.idx` and
    /// `<name>-manifest.json`.
    #[serde(default = "d_name")]
    pub name: String,
    #[serde(default = "d_kind")]
    pub kind: GenKind,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    /// First template id; classes use templates `first_template..first_template + num_classes`.
    #[serde(default)]
    pub first_template: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    /// Image count for the noise kinds.
    #[serde(default)]
    pub count: usize,
    #[serde(default = "d_side")]
    pub image_side: usize,
    #[serde(default = "d_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "d_scale")]
    pub noise_scale: f64,
    /// Base set for `noised_known`.
    #[serde(default)]
    pub base_images: Option<PathBuf>,
    #[serde(default)]
    pub base_labels: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn d_kind() -> GenKind {
    GenKind::Templates
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            name: d_name(),
            kind: d_kind(),
            num_classes: d_classes(),
            first_template: 0,
            per_class: d_per_class(),
            count: 0,
            image_side: d_side(),
            noise_sigma: d_sigma(),
            noise_scale: d_scale(),
            base_images: None,
            base_labels: None,
            seed: 0,
        }
    }
}

/// An image/label IDX file pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
}

impl IdxPair {
    pub fn named(dir: &str, stem: &str) -> Self {
        IdxPair {
            images: PathBuf::from(format!("{dir}/{stem}-images.idx")),
            labels: PathBuf::from(format!("{dir}/{stem}-labels.idx")),
        }
    }
}

fn d_train_data() -> IdxPair {
    IdxPair::named("out", "train")
}
fn d_test_data() -> IdxPair {
    IdxPair::named("out", "test")
}
fn d_tau_l() -> f64 {
    0.5
}
fn d_checkpoint() -> PathBuf {
    PathBuf::from("out/checkpoint.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    #[serde(default = "d_train_data")]
    pub data: IdxPair,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "d_tau_l")]
    pub tau_l: f64,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            data: d_train_data(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            tau_l: d_tau_l(),
        }
    }
}

fn d_detector() -> DetectorKind {
    DetectorKind::CgdAndRe
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmdConfig {
    #[serde(default = "d_checkpoint")]
    pub checkpoint: PathBuf,
    /// Known-class test data; labels must lie in `0..K`.
    #[serde(default = "d_test_data")]
    pub known: IdxPair,
    /// Unknown test sets. Every sample counts as unknown; each distinct label
    /// within a file counts as one unknown class for openness.
    #[serde(default)]
    pub unknown: Vec<IdxPair>,
    #[serde(default = "d_detector")]
    pub detector: DetectorKind,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        EvalCmdConfig {
            checkpoint: d_checkpoint(),
            known: d_test_data(),
            unknown: Vec::new(),
            detector: d_detector(),
        }
    }
}

fn d_latents() -> String {
    "latents.csv".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportLatentsConfig {
    #[serde(default = "d_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "d_test_data")]
    pub data: IdxPair,
    #[serde(default = "d_latents")]
    pub file_name: String,
}

impl Default for ExportLatentsConfig {
    fn default() -> Self {
        ExportLatentsConfig {
            checkpoint: d_checkpoint(),
            data: d_test_data(),
            file_name: d_latents(),
        }
    }
}
