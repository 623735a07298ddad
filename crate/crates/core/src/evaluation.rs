//! Open-set metrics, the baseline ablation grid and latent export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_templates, make_outliers, LabeledImageSet, OutlierKind, TEMPLATE_COUNT};
use crate::detector::{Detector, DetectorKind};
use crate::error::{Error, Result};
use crate::ladder::{Inference, LadderConfig, LadderModel};
use crate::numerics::{SeededRng, Tensor};
use crate::trainer::{train, TrainConfig};

/// Square confusion matrix over `K` known classes plus unknown at index `K`.
/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    matrix: Vec<Vec<u64>>,
}

impl ConfusionCounts {
    pub fn new(num_known: usize) -> Self {
        ConfusionCounts {
            matrix: vec![vec![0; num_known + 1]; num_known + 1],
        }
    }

    pub fn from_matrix(matrix: Vec<Vec<u64>>) -> Result<Self> {
        let n = matrix.len();
        if n < 2 || matrix.iter().any(|r| r.len() != n) {
            return Err(Error::dim("confusion", format!("need a square matrix of side >= 2, got {n} rows")));
        }
        Ok(ConfusionCounts { matrix })
    }

    pub fn from_pairs(num_known: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim("confusion", "truth and prediction lengths differ"));
        }
        let mut c = ConfusionCounts::new(num_known);
        for (&t, &p) in truth.iter().zip(predicted) {
            c.record(t, p)?;
        }
        Ok(c)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let size = self.size();
        for v in [truth, predicted] {
            if v >= size {
                return Err(Error::Index {
                    what: "confusion classes",
                    index: v,
                    len: size,
                });
            }
        }
        self.matrix[truth][predicted] += 1;
        Ok(())
    }

    pub fn num_known(&self) -> usize {
        self.matrix.len() - 1
    }

    /// `K + 1`.
    pub fn size(&self) -> usize {
        self.matrix.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.matrix[truth][predicted]
    }

    pub fn matrix(&self) -> &[Vec<u64>] {
        &self.matrix
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.matrix[truth].iter().sum()
    }

    pub fn column_total(&self, predicted: usize) -> u64 {
        self.matrix.iter().map(|r| r[predicted]).sum()
    }

    /// F1 of class `c`; a zero precision or recall denominator counts as 0.
    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.matrix[c][c] as f64;
        let ratio = |den: u64| if den == 0 { 0.0 } else { tp / den as f64 };
        let (p, r) = (ratio(self.column_total(c)), ratio(self.row_total(c)));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.size()).map(|c| self.f1(c)).collect()
    }
}

/// Unweighted mean of the per-class F1 scores over all `K + 1` classes.
pub fn macro_f1(counts: &ConfusionCounts) -> f64 {
    let f = counts.per_class_f1();
    f.iter().sum::<f64>() / f.len() as f64
}

/// Mean F1 over the known classes only.
pub fn known_macro_f1(counts: &ConfusionCounts) -> f64 {
    let k = counts.num_known();
    (0..k).map(|c| counts.f1(c)).sum::<f64>() / k as f64
}

/// `1 − sqrt(2·n_train / (n_test + n_target))`, with class counts as arguments.
pub fn openness(n_train: usize, n_test: usize, n_target: usize) -> Result<f64> {
    if n_train == 0 || n_test == 0 || n_target == 0 {
        return Err(Error::Domain("openness needs positive class counts".into()));
    }
    if 2 * n_train > n_test + n_target {
        return Err(Error::Domain(format!(
            "openness needs 2*n_train <= n_test + n_target, got {n_train}, {n_test}, {n_target}"
        )));
    }
    Ok(1.0 - (2.0 * n_train as f64 / (n_test + n_target) as f64).sqrt())
}

/// Openness when `known` classes are trained on and `unknown` extra classes
/// appear at test time.
pub fn openness_for(known: usize, unknown: usize) -> Result<f64> {
    openness(known, known + unknown, known)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: DetectorKind,
    pub num_known: usize,
    pub known_samples: usize,
    pub unknown_samples: usize,
    pub unknown_classes: usize,
    pub openness: f64,
    pub confusion: ConfusionCounts,
    pub per_class_f1: Vec<f64>,
    /// Over `K + 1` classes, or over the `K` known classes when the test
    /// data holds no unknown samples.
    pub macro_f1: f64,
    /// Argmax accuracy on known samples, ignoring rejection.
    pub closed_set_accuracy: f64,
    pub unknown_rejection_rate: Option<f64>,
}

/// Scores precomputed inference results. Known labels must lie in `0..K`;
/// every unknown row is truth `K`.
pub fn evaluate_inference(
    detector: &Detector,
    kind: DetectorKind,
    known: &Inference,
    known_labels: &[usize],
    unknown: &Inference,
    unknown_classes: usize,
) -> Result<EvalReport> {
    let k = detector.gaussians.len();
    if known_labels.len() != known.len() {
        return Err(Error::dim("evaluate", "known labels and inference lengths differ"));
    }
    let mut confusion = ConfusionCounts::new(k);
    let mut correct = 0usize;
    for (i, d) in detector.decide_all(kind, known).iter().enumerate() {
        confusion.record(known_labels[i], d.class_index(k))?;
        correct += usize::from(known.predicted(i) == known_labels[i]);
    }
    let mut rejected = 0usize;
    for d in detector.decide_all(kind, unknown) {
        let c = d.class_index(k);
        rejected += usize::from(c == k);
        confusion.record(k, c)?;
    }
    let macro_f1 = if unknown.is_empty() {
        known_macro_f1(&confusion)
    } else {
        macro_f1(&confusion)
    };
    Ok(EvalReport {
        detector: kind,
        num_known: k,
        known_samples: known.len(),
        unknown_samples: unknown.len(),
        unknown_classes,
        openness: if unknown_classes == 0 { 0.0 } else { openness_for(k, unknown_classes)? },
        per_class_f1: confusion.per_class_f1(),
        confusion,
        macro_f1,
        closed_set_accuracy: if known.is_empty() {
            0.0
        } else {
            correct as f64 / known.len() as f64
        },
        unknown_rejection_rate: (!unknown.is_empty()).then(|| rejected as f64 / unknown.len() as f64),
    })
}

/// Runs the model over a known test set and a list of unknown sets.
pub fn evaluate(
    model: &LadderModel,
    detector: &Detector,
    kind: DetectorKind,
    known: &LabeledImageSet,
    unknown: &[LabeledImageSet],
    unknown_classes: usize,
) -> Result<EvalReport> {
    let known_inf = model.infer(&known.features())?;
    let mut all = LabeledImageSet::empty(known.height, known.width, vec!["unknown".into()]);
    for set in unknown {
        let mut relabeled = set.clone();
        relabeled.labels.iter_mut().for_each(|l| *l = 0);
        relabeled.class_names = all.class_names.clone();
        all.extend(&relabeled)?;
    }
    let unknown_inf = model.infer(&all.features())?;
    evaluate_inference(detector, kind, &known_inf, &known.labels, &unknown_inf, unknown_classes)
}

/// How a model is trained for an ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingProfile {
    /// Encoder and classifier only: no reconstruction or KL terms.
    Plain,
    /// Full objective without merging at the middle rungs.
    NoLadder,
    Ladder,
}

impl TrainingProfile {
    pub fn ladder_enabled(self) -> bool {
        self == TrainingProfile::Ladder
    }

    /// Adjusts a training config for this profile.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        match self {
            TrainingProfile::Plain => TrainConfig {
                recon_weight: 0.0,
                beta_max: 0.0,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: &'static str,
    pub profile: TrainingProfile,
    pub detector: DetectorKind,
}

impl AblationVariant {
    pub fn ladder_enabled(&self) -> bool {
        self.profile.ladder_enabled()
    }

    pub fn named(name: &str) -> Result<AblationVariant> {
        VARIANTS.iter().find(|v| v.name == name).copied().ok_or_else(|| {
            let valid: Vec<&str> = VARIANTS.iter().map(|v| v.name).collect();
            Error::Config(format!("unknown variant {name:?}; valid names: {}", valid.join(", ")))
        })
    }
}

/// The seven baselines, I to VII.
pub const VARIANTS: [AblationVariant; 7] = [
    AblationVariant {
        name: "I",
        profile: TrainingProfile::Plain,
        detector: DetectorKind::SoftmaxThreshold,
    },
    AblationVariant {
        name: "II",
        profile: TrainingProfile::NoLadder,
        detector: DetectorKind::SoftmaxThreshold,
    },
    AblationVariant {
        name: "III",
        profile: TrainingProfile::Ladder,
        detector: DetectorKind::SoftmaxThreshold,
    },
    AblationVariant {
        name: "IV",
        profile: TrainingProfile::NoLadder,
        detector: DetectorKind::Cgd,
    },
    AblationVariant {
        name: "V",
        profile: TrainingProfile::Ladder,
        detector: DetectorKind::Cgd,
    },
    AblationVariant {
        name: "VI",
        profile: TrainingProfile::Ladder,
        detector: DetectorKind::Re,
    },
    AblationVariant {
        name: "VII",
        profile: TrainingProfile::Ladder,
        detector: DetectorKind::CgdAndRe,
    },
];

fn d_num_known() -> usize {
    4
}
fn d_train_per_class() -> usize {
    500
}
fn d_test_per_class() -> usize {
    100
}
fn d_side() -> usize {
    8
}
fn d_noise_sigma() -> f64 {
    0.1
}

/// Synthetic known/unknown data for one experiment. Known classes are
/// templates `0..num_known`; unknown classes follow them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "d_num_known")]
    pub num_known: usize,
    #[serde(default = "d_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub unknown_per_class: usize,
    /// Extra uniform-noise images added to every unknown test set.
    #[serde(default)]
    pub noise_images: usize,
    #[serde(default = "d_side")]
    pub image_side: usize,
    #[serde(default = "d_noise_sigma")]
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_known: d_num_known(),
            train_per_class: d_train_per_class(),
            test_per_class: d_test_per_class(),
            unknown_per_class: d_test_per_class(),
            noise_images: 0,
            image_side: d_side(),
            noise_sigma: d_noise_sigma(),
        }
    }
}

/// Generated sets for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: LabeledImageSet,
    pub test_known: LabeledImageSet,
    /// Unseen-template classes; label `i` is the `i`-th unknown class.
    pub unseen: LabeledImageSet,
    pub noise: LabeledImageSet,
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64, unknown_classes: usize) -> Result<SyntheticSplit> {
        if self.num_known + unknown_classes > TEMPLATE_COUNT {
            return Err(Error::Config(format!(
                "{} known plus {unknown_classes} unknown classes exceed the {TEMPLATE_COUNT} templates",
                self.num_known
            )));
        }
        if self.num_known == 0 || self.train_per_class == 0 {
            return Err(Error::Config("num_known and train_per_class must be positive".into()));
        }
        let known: Vec<usize> = (0..self.num_known).collect();
        let (side, sigma) = (self.image_side, self.noise_sigma);
        let train = generate_templates(&known, self.train_per_class, side, sigma, SeededRng::derive_seed(seed, 1))?;
        let test_known = generate_templates(&known, self.test_per_class, side, sigma, SeededRng::derive_seed(seed, 2))?;
        let unseen = if unknown_classes == 0 {
            LabeledImageSet::empty(side, side, Vec::new())
        } else {
            let kind = OutlierKind::UnseenTemplates {
                first_template: self.num_known,
                classes: unknown_classes,
                side,
                noise_sigma: sigma,
            };
            make_outliers(&kind, None, unknown_classes * self.unknown_per_class, SeededRng::derive_seed(seed, 3))?
        };
        let noise = make_outliers(
            &OutlierKind::UniformNoise { side },
            None,
            self.noise_images,
            SeededRng::derive_seed(seed, 4),
        )?;
        Ok(SyntheticSplit {
            train,
            test_known,
            unseen,
            noise,
        })
    }
}

fn d_layer_dims() -> Vec<usize> {
    vec![64, 32]
}
fn d_latent() -> usize {
    32
}
fn d_prelu() -> f64 {
    0.25
}

/// Architecture parameters that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_layer_dims")]
    pub layer_dims: Vec<usize>,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_prelu")]
    pub prelu_init: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            layer_dims: d_layer_dims(),
            latent_dim: d_latent(),
            prelu_init: d_prelu(),
        }
    }
}

impl ModelSpec {
    pub fn ladder_config(&self, input_dim: usize, num_classes: usize, ladder: bool) -> LadderConfig {
        LadderConfig {
            prelu_init: self.prelu_init,
            ladder,
            ..LadderConfig::new(input_dim, self.layer_dims.clone(), self.latent_dim, num_classes)
        }
    }
}

/// Builds, trains and calibrates one model.
pub fn train_profile(
    train_set: &LabeledImageSet,
    model_spec: &ModelSpec,
    base: &TrainConfig,
    profile: TrainingProfile,
    seed: u64,
    tau_l: f64,
) -> Result<(LadderModel, Detector)> {
    let config = model_spec.ladder_config(train_set.pixels(), train_set.num_classes(), profile.ladder_enabled());
    let mut model = LadderModel::new(config, seed)?;
    let train_config = TrainConfig {
        seed,
        ..profile.train_config(base)
    };
    let x = train_set.features();
    train(&mut model, &x, &train_set.labels, &train_config, None)?;
    let detector = Detector::calibrate(&model, &x, &train_set.labels, tau_l)?;
    Ok((model, detector))
}

fn d_variants() -> Vec<String> {
    VARIANTS.iter().map(|v| v.name.to_string()).collect()
}
fn d_unknown_counts() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn d_tau_l() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "d_variants")]
    pub variants: Vec<String>,
    /// Numbers of unseen classes at test time; each gives one openness level.
    #[serde(default = "d_unknown_counts")]
    pub unknown_class_counts: Vec<usize>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_tau_l")]
    pub tau_l: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            data: SyntheticSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            variants: d_variants(),
            unknown_class_counts: d_unknown_counts(),
            seeds: d_seeds(),
            tau_l: d_tau_l(),
        }
    }
}

impl AblationConfig {
    pub fn resolved_variants(&self) -> Result<Vec<AblationVariant>> {
        if self.variants.is_empty() {
            return Err(Error::Config("variant list is empty".into()));
        }
        self.variants.iter().map(|n| AblationVariant::named(n)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_variants()?;
        self.train.validate()?;
        if self.seeds.is_empty() || self.unknown_class_counts.is_empty() {
            return Err(Error::Config("seeds and unknown_class_counts must be nonempty".into()));
        }
        let max_u = self.unknown_class_counts.iter().max().copied().unwrap_or(0);
        if self.data.num_known + max_u > TEMPLATE_COUNT {
            return Err(Error::Config(format!(
                "{} known plus {max_u} unknown classes exceed the {TEMPLATE_COUNT} templates",
                self.data.num_known
            )));
        }
        Ok(())
    }
}

/// One grid cell aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ladder: bool,
    pub detector: DetectorKind,
    pub unknown_classes: usize,
    pub openness: f64,
    /// Macro-F1 for each seed in config order; `None` for a failed run.
    pub per_seed_f1: Vec<Option<f64>>,
    pub mean_f1: Option<f64>,
    pub std_f1: Option<f64>,
    pub mean_closed_set_accuracy: Option<f64>,
    /// Closed-set accuracy for each seed in config order.
    pub per_seed_accuracy: Vec<Option<f64>>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str =
    "variant,ladder,detector,unknown_classes,openness,seeds_ok,mean_f1,std_f1,mean_closed_set_accuracy,errors";

impl AblationTable {
    pub fn row(&self, variant: &str, unknown_classes: usize) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.unknown_classes == unknown_classes)
    }

    pub fn succeeded_cells(&self) -> usize {
        self.rows.iter().filter(|r| r.mean_f1.is_some()).count()
    }

    /// CSV with each line of `preamble` emitted first as a `# ` comment.
    pub fn to_csv(&self, preamble: &str) -> String {
        let mut out = comment_block(preamble);
        out.push_str(ABLATION_CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},\"{}\"",
                r.variant,
                r.ladder,
                detector_name(r.detector),
                r.unknown_classes,
                r.openness,
                r.per_seed_f1.iter().flatten().count(),
                opt(r.mean_f1),
                opt(r.std_f1),
                opt(r.mean_closed_set_accuracy),
                r.errors.join("; ").replace('"', "'"),
            );
        }
        out
    }
}

pub fn detector_name(kind: DetectorKind) -> &'static str {
    match kind {
        DetectorKind::SoftmaxThreshold => "softmax_threshold",
        DetectorKind::Cgd => "cgd",
        DetectorKind::Re => "re",
        DetectorKind::CgdAndRe => "cgd_and_re",
    }
}

pub(crate) fn comment_block(preamble: &str) -> String {
    preamble.lines().map(|l| format!("# {l}\n")).collect()
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Inference results of one trained profile on one seed's data.
struct ProfileRun {
    detector: Detector,
    known: Inference,
    known_labels: Vec<usize>,
    unseen: Inference,
    unseen_labels: Vec<usize>,
    noise: Inference,
}

fn select_inference(inf: &Inference, rows: &[usize]) -> Result<Inference> {
    Ok(Inference {
        z: inf.z.select_rows(rows)?,
        probs: inf.probs.select_rows(rows)?,
        recon_error: rows.iter().map(|&i| inf.recon_error[i]).collect(),
    })
}

fn concat_inference(a: &Inference, b: &Inference) -> Result<Inference> {
    let cat = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let (n, c) = x.dims2()?;
        let (m, _) = y.dims2()?;
        Tensor::new(vec![n + m, c], [x.data(), y.data()].concat())
    };
    Ok(Inference {
        z: cat(&a.z, &b.z)?,
        probs: cat(&a.probs, &b.probs)?,
        recon_error: [a.recon_error.as_slice(), &b.recon_error].concat(),
    })
}

fn run_profile(config: &AblationConfig, profile: TrainingProfile, seed: u64, max_unknown: usize) -> Result<ProfileRun> {
    let data = config.data.generate(seed, max_unknown)?;
    let (model, detector) = train_profile(&data.train, &config.model, &config.train, profile, seed, config.tau_l)?;
    Ok(ProfileRun {
        detector,
        known: model.infer(&data.test_known.features())?,
        known_labels: data.test_known.labels,
        unseen: model.infer(&data.unseen.features())?,
        unseen_labels: data.unseen.labels,
        noise: model.infer(&data.noise.features())?,
    })
}

/// Trains every needed (seed, profile) pair once, then scores each variant at
/// each openness level. Failed runs leave `None` cells with a diagnostic.
///
/// `threads` caps the worker pool; results do not depend on it.
pub fn run_ablation(config: &AblationConfig, threads: Option<usize>) -> Result<AblationTable> {
    config.validate()?;
    let variants = config.resolved_variants()?;
    let mut profiles: Vec<TrainingProfile> = variants.iter().map(|v| v.profile).collect();
    profiles.sort();
    profiles.dedup();
    let max_unknown = config.unknown_class_counts.iter().max().copied().unwrap_or(0);

    let jobs: Vec<(u64, TrainingProfile)> = config
        .seeds
        .iter()
        .flat_map(|&s| profiles.iter().map(move |&p| (s, p)))
        .collect();
    let work = || -> Vec<Result<ProfileRun>> {
        jobs.par_iter()
            .map(|&(seed, profile)| run_profile(config, profile, seed, max_unknown))
            .collect()
    };
    let runs = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let run_for = |seed_idx: usize, profile: TrainingProfile| {
        let p = profiles.iter().position(|&q| q == profile).expect("profile scheduled");
        &runs[seed_idx * profiles.len() + p]
    };

    let mut rows = Vec::new();
    for v in &variants {
        for &u in &config.unknown_class_counts {
            let mut per_seed_f1 = Vec::with_capacity(config.seeds.len());
            let mut per_seed_accuracy = Vec::with_capacity(config.seeds.len());
            let mut errors = Vec::new();
            for (si, &seed) in config.seeds.iter().enumerate() {
                let scored = run_for(si, v.profile).as_ref().map_err(|e| e.to_string()).and_then(|run| {
                    let rows_u: Vec<usize> = (0..run.unseen_labels.len()).filter(|&i| run.unseen_labels[i] < u).collect();
                    let unknown = select_inference(&run.unseen, &rows_u)
                        .and_then(|s| concat_inference(&s, &run.noise))
                        .map_err(|e| e.to_string())?;
                    evaluate_inference(&run.detector, v.detector, &run.known, &run.known_labels, &unknown, u)
                        .map_err(|e| e.to_string())
                });
                match scored {
                    Ok(report) => {
                        per_seed_f1.push(Some(report.macro_f1));
                        per_seed_accuracy.push(Some(report.closed_set_accuracy));
                    }
                    Err(e) => {
                        per_seed_f1.push(None);
                        per_seed_accuracy.push(None);
                        errors.push(format!("seed {seed}: {e}"));
                    }
                }
            }
            let ok: Vec<f64> = per_seed_f1.iter().flatten().copied().collect();
            let stats = mean_std(&ok);
            let accs: Vec<f64> = per_seed_accuracy.iter().flatten().copied().collect();
            rows.push(AblationRow {
                variant: v.name.to_string(),
                ladder: v.ladder_enabled(),
                detector: v.detector,
                unknown_classes: u,
                openness: if u == 0 { 0.0 } else { openness_for(config.data.num_known, u)? },
                per_seed_f1,
                mean_f1: stats.map(|s| s.0),
                std_f1: stats.map(|s| s.1),
                mean_closed_set_accuracy: mean_std(&accs).map(|s| s.0),
                per_seed_accuracy,
                errors,
            });
        }
    }
    Ok(AblationTable { rows })
}

pub const LATENT_CSV_PREFIX: &str = "sample_id,label";

/// Writes deterministic latent codes as CSV rows `sample_id,label,z_1..z_J`,
/// preceded by `preamble` as comment lines. Values use shortest round-trip
/// formatting, so reading them back is exact.
pub fn export_latents(model: &LadderModel, dataset: &LabeledImageSet, path: &Path, preamble: &str) -> Result<()> {
    let inf = model.infer(&dataset.features())?;
    let j = model.config().latent_dim;
    let mut out = comment_block(preamble);
    out.push_str(LATENT_CSV_PREFIX);
    for d in 1..=j {
        let _ = write!(out, ",z_{d}");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let _ = write!(out, "{i},{}", dataset.labels[i]);
        for v in inf.z.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One row of a latent CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub sample_id: usize,
    pub label: usize,
    pub z: Vec<f64>,
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    let mut seen_header = false;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !seen_header {
            if !line.starts_with(LATENT_CSV_PREFIX) {
                return Err(Error::Format {
                    offset: here,
                    detail: "missing latent CSV header".into(),
                });
            }
            seen_header = true;
            continue;
        }
        let bad = |detail: String| Error::Format { offset: here, detail };
        let mut fields = line.split(',');
        let mut int = |name: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(format!("bad {name} field")))
        };
        let sample_id = int("sample_id")?;
        let label = int("label")?;
        let z = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("bad latent value {f:?}: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(LatentRow { sample_id, label, z });
    }
    Ok(rows)
}
