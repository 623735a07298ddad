//! Image sets: IDX files, synthetic template classes, outlier sets and
//! known/unknown splits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Grayscale images with integer labels indexing `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub height: usize,
    pub width: usize,
    /// `len() · height · width` pixels in `[0, 1]`, image after image.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let set = LabeledImageSet {
            height,
            width,
            images,
            labels,
            class_names,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(height: usize, width: usize, class_names: Vec<String>) -> Self {
        LabeledImageSet {
            height,
            width,
            images: Vec::new(),
            labels: Vec::new(),
            class_names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() * self.pixels() {
            return Err(Error::Config(format!(
                "{} pixels for {} images of {}x{}",
                self.images.len(),
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Config(format!(
                "label {bad} has no class name ({} classes)",
                self.class_names.len()
            )));
        }
        if self.images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// Images flattened into the rows of an `[n, height·width]` matrix.
    pub fn features(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.pixels()], self.images.clone()).expect("validated set")
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            height: self.height,
            width: self.width,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Number of samples carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Appends `other`, keeping this set's class names. Labels of `other` must
    /// already refer to them.
    pub fn extend(&mut self, other: &LabeledImageSet) -> Result<()> {
        if (other.height, other.width) != (self.height, self.width) {
            return Err(Error::Config("image sizes differ".into()));
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        self.validate()
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file into `(count, height, width, pixels)`, scaling
/// bytes to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let need = n * h * w;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated pixel data: {need} bytes declared, {} present", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Format {
            offset: (16 + need) as u64,
            detail: format!("{} trailing bytes", body.len() - need),
        });
    }
    Ok((n, h, w, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        let offset = if body.len() < n { bytes.len() } else { 8 + n };
        return Err(Error::Format {
            offset: offset as u64,
            detail: format!("{n} labels declared, {} bytes present", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. Class names are `"0"`, `"1"`, … up to the
/// largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, h, w, images) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            detail: format!("count mismatch: {n} images but {} labels", labels.len()),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let names = (0..k).map(|i| i.to_string()).collect();
    LabeledImageSet::new(h, w, images, labels, names)
}

pub fn encode_idx_images(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.images.len());
    for v in [IDX_IMAGES_MAGIC, set.len() as u32, set.height as u32, set.width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(set.images.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_idx_labels(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for &l in &set.labels {
        out.push(u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

/// Writes a set as an image/label IDX pair. Pixels are quantized to bytes.
pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let labels = encode_idx_labels(set)?;
    fs::write(images_path, encode_idx_images(set)).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
}

/// Number of distinct geometric templates available.
pub const TEMPLATE_COUNT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    HBand(usize),
    VBand(usize),
    Quadrant(usize),
}

/// Template order interleaves shape families so that any prefix mixes bands
/// and blocks.
const TEMPLATES: [Shape; TEMPLATE_COUNT] = [
    Shape::HBand(0),
    Shape::VBand(1),
    Shape::Quadrant(0),
    Shape::HBand(2),
    Shape::VBand(3),
    Shape::Quadrant(3),
    Shape::HBand(1),
    Shape::VBand(0),
    Shape::Quadrant(1),
    Shape::HBand(3),
    Shape::VBand(2),
    Shape::Quadrant(2),
];

pub fn template_name(id: usize) -> String {
    match TEMPLATES[id] {
        Shape::HBand(i) => format!("hband-{i}"),
        Shape::VBand(i) => format!("vband-{i}"),
        Shape::Quadrant(i) => format!("block-{i}"),
    }
}

fn check_side(side: usize) -> Result<()> {
    if side < 4 || !side.is_multiple_of(4) {
        return Err(Error::Config(format!("image side {side} must be a positive multiple of 4")));
    }
    Ok(())
}

/// Noise-free 0/1 image of template `id`: a band covering one quarter of the
/// rows or columns, or one of the four quadrant blocks.
pub fn template(id: usize, side: usize) -> Result<Vec<f64>> {
    check_side(side)?;
    let shape = *TEMPLATES.get(id).ok_or(Error::Index {
        what: "templates",
        index: id,
        len: TEMPLATE_COUNT,
    })?;
    let q = side / 4;
    let h = side / 2;
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let on = match shape {
                Shape::HBand(i) => r / q == i,
                Shape::VBand(i) => c / q == i,
                Shape::Quadrant(i) => r / h == i / 2 && c / h == i % 2,
            };
            if on {
                img[r * side + c] = 1.0;
            }
        }
    }
    Ok(img)
}

/// Images of the given templates, `per_class` each, with clipped Gaussian
/// pixel noise. Labels index `template_ids`.
pub fn generate_templates(
    template_ids: &[usize],
    per_class: usize,
    side: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledImageSet> {
    check_side(side)?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma {noise_sigma} must be finite and nonnegative")));
    }
    let templates: Vec<Vec<f64>> = template_ids.iter().map(|&t| template(t, side)).collect::<Result<_>>()?;
    let k = template_ids.len();
    let mut rng = SeededRng::new(seed).split(0x5e7);
    let mut images = Vec::with_capacity(k * per_class * side * side);
    let mut labels = Vec::with_capacity(k * per_class);
    for i in 0..k * per_class {
        let class = i % k;
        for &p in &templates[class] {
            let v = if noise_sigma > 0.0 { p + noise_sigma * rng.normal() } else { p };
            images.push(v.clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    let names = template_ids.iter().map(|&t| template_name(t)).collect();
    LabeledImageSet::new(side, side, images, labels, names)
}

/// `num_classes` template classes (templates `0..num_classes`).
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    image_side: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledImageSet> {
    if num_classes == 0 || num_classes > TEMPLATE_COUNT {
        return Err(Error::Config(format!(
            "num_classes {num_classes} must lie in 1..={TEMPLATE_COUNT}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let ids: Vec<usize> = (0..num_classes).collect();
    generate_templates(&ids, per_class, image_side, noise_sigma, seed)
}

/// Record of how a synthetic set was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub classes: Vec<ManifestClass>,
    pub image_side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub id: usize,
    pub template: String,
}

impl SyntheticManifest {
    pub fn new(template_ids: &[usize], image_side: usize, noise_sigma: f64, seed: u64) -> Self {
        SyntheticManifest {
            classes: template_ids
                .iter()
                .enumerate()
                .map(|(id, &t)| ManifestClass {
                    id,
                    template: template_name(t),
                })
                .collect(),
            image_side,
            noise_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutlierKind {
    /// Every pixel drawn independently from U[0, 1].
    UniformNoise { side: usize },
    /// Base images plus `scale`·U[0, 1] noise, clipped to [0, 1].
    NoisedKnown { scale: f64 },
    /// Template classes `first_template..first_template + classes`, which
    /// lie outside a known set of `0..first_template`.
    UnseenTemplates {
        first_template: usize,
        classes: usize,
        side: usize,
        noise_sigma: f64,
    },
}

/// Default amplitude of the uniform noise added to known images.
pub const NOISED_KNOWN_SCALE: f64 = 0.5;

/// Builds `count` outlier images. Noise outliers carry the single class
/// `"unknown"`; unseen-template outliers keep their template names.
pub fn make_outliers(
    kind: &OutlierKind,
    base: Option<&LabeledImageSet>,
    count: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    let mut rng = SeededRng::new(seed).split(0x0de);
    match *kind {
        OutlierKind::UniformNoise { side } => {
            if side == 0 {
                return Err(Error::Config("image side must be positive".into()));
            }
            let images = (0..count * side * side).map(|_| rng.uniform()).collect();
            LabeledImageSet::new(side, side, images, vec![0; count], vec!["unknown".into()])
        }
        OutlierKind::NoisedKnown { scale } => {
            let base = base.ok_or_else(|| Error::Config("noised_known outliers need a base set".into()))?;
            if base.is_empty() && count > 0 {
                return Err(Error::Config("noised_known base set is empty".into()));
            }
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::Config(format!("noise scale {scale} must be finite and nonnegative")));
            }
            let mut images = Vec::with_capacity(count * base.pixels());
            for i in 0..count {
                for &p in base.image(i % base.len()) {
                    images.push((p + scale * rng.uniform()).clamp(0.0, 1.0));
                }
            }
            LabeledImageSet::new(base.height, base.width, images, vec![0; count], vec!["unknown".into()])
        }
        OutlierKind::UnseenTemplates {
            first_template,
            classes,
            side,
            noise_sigma,
        } => {
            if classes == 0 || first_template + classes > TEMPLATE_COUNT {
                return Err(Error::Config(format!(
                    "unseen templates {first_template}..{} exceed the {TEMPLATE_COUNT} available",
                    first_template + classes
                )));
            }
            let ids: Vec<usize> = (first_template..first_template + classes).collect();
            let per_class = count.div_ceil(classes);
            let full = generate_templates(&ids, per_class.max(1), side, noise_sigma, rng.seed() ^ 0x9e37_79b9_7f4a_7c15)?;
            let keep: Vec<usize> = (0..count).collect();
            Ok(full.subset(&keep))
        }
    }
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub known_class_ids: Vec<usize>,
    pub unknown_class_ids: Vec<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Result of [`split`]; the index lists refer to rows of the input set.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_known: LabeledImageSet,
    pub test_known: LabeledImageSet,
    pub test_unknown: LabeledImageSet,
    pub train_indices: Vec<usize>,
    pub test_known_indices: Vec<usize>,
    pub test_unknown_indices: Vec<usize>,
}

/// Partitions `dataset` into known-class train/test sets and an unknown test
/// set. Known labels are renumbered by their position in `known_class_ids`;
/// every unknown sample gets the label `K = known_class_ids.len()`.
pub fn split(dataset: &LabeledImageSet, spec: &SplitSpec) -> Result<Split> {
    if spec.known_class_ids.is_empty() {
        return Err(Error::Config("known_class_ids is empty".into()));
    }
    if let Some(c) = spec.known_class_ids.iter().find(|c| spec.unknown_class_ids.contains(c)) {
        return Err(Error::Config(format!("class {c} is listed as both known and unknown")));
    }
    let all: Vec<usize> = spec.known_class_ids.iter().chain(&spec.unknown_class_ids).copied().collect();
    for (i, c) in all.iter().enumerate() {
        if *c >= dataset.num_classes() {
            return Err(Error::Config(format!(
                "class {c} not in dataset ({} classes)",
                dataset.num_classes()
            )));
        }
        if all[..i].contains(c) {
            return Err(Error::Config(format!("class {c} listed twice")));
        }
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }

    let root = SeededRng::new(spec.seed);
    let mut train_indices = Vec::new();
    let mut test_known_indices = Vec::new();
    for &c in &spec.known_class_ids {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        root.split(c as u64).shuffle(&mut idx);
        let cut = (spec.train_fraction * idx.len() as f64).round() as usize;
        train_indices.extend_from_slice(&idx[..cut]);
        test_known_indices.extend_from_slice(&idx[cut..]);
    }
    train_indices.sort_unstable();
    test_known_indices.sort_unstable();
    let test_unknown_indices: Vec<usize> = (0..dataset.len())
        .filter(|&i| spec.unknown_class_ids.contains(&dataset.labels[i]))
        .collect();

    let k = spec.known_class_ids.len();
    let known_names: Vec<String> = spec
        .known_class_ids
        .iter()
        .map(|&c| dataset.class_names[c].clone())
        .collect();
    let relabel_known = |indices: &[usize]| {
        let mut s = dataset.subset(indices);
        for l in &mut s.labels {
            *l = spec.known_class_ids.iter().position(|c| c == l).expect("known label");
        }
        s.class_names = known_names.clone();
        s
    };
    let mut test_unknown = dataset.subset(&test_unknown_indices);
    test_unknown.labels.iter_mut().for_each(|l| *l = k);
    test_unknown.class_names = known_names.iter().cloned().chain(["unknown".to_string()]).collect();

    Ok(Split {
        train_known: relabel_known(&train_indices),
        test_known: relabel_known(&test_known_indices),
        test_unknown,
        train_indices,
        test_known_indices,
        test_unknown_indices,
    })
}
