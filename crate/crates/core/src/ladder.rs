//! The probabilistic ladder network: encoder rungs, decoder rungs with
//! precision-weighted merging, classifier head and class-mean embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, ParamStore, SeededRng, Tape, Tensor, Var};

/// Feature transform used inside each rung.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    #[default]
    Dense,
}

fn default_latent_dim() -> usize {
    32
}

fn default_prelu_init() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_prelu_init")]
    pub prelu_init: f64,
    #[serde(default)]
    pub layer_kind: LayerKind,
    /// Merge bottom-up and top-down statistics at the middle rungs. When
    /// off, the decoder runs purely top-down and only the latent KL applies.
    #[serde(default = "default_true")]
    pub ladder: bool,
}

impl LadderConfig {
    pub fn new(input_dim: usize, layer_dims: Vec<usize>, latent_dim: usize, num_classes: usize) -> Self {
        LadderConfig {
            input_dim,
            layer_dims,
            latent_dim,
            num_classes,
            prelu_init: default_prelu_init(),
            layer_kind: LayerKind::Dense,
            ladder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::Config("layer_dims needs at least one positive width".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !self.prelu_init.is_finite() {
            return Err(Error::Config("prelu_init must be finite".into()));
        }
        Ok(())
    }

    /// Number of rungs, L.
    pub fn rungs(&self) -> usize {
        self.layer_dims.len()
    }

    /// Width of the Gaussian statistics carried by rung `i` (0-based). The
    /// top rung carries the latent code; middle rungs match their feature width.
    pub fn stat_dim(&self, i: usize) -> usize {
        if i + 1 == self.rungs() {
            self.latent_dim
        } else {
            self.layer_dims[i]
        }
    }
}

/// Mean and variance of a diagonal Gaussian, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mu: Tensor,
    pub var: Tensor,
}

impl LayerStats {
    pub fn new(mu: Tensor, var: Tensor) -> Result<Self> {
        if mu.shape() != var.shape() {
            return Err(Error::dim("layer_stats", "mean and variance shapes differ"));
        }
        if var.data().iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::contract("layer_stats", "variance must be positive"));
        }
        Ok(LayerStats { mu, var })
    }
}

/// Tape handles for one rung's statistics.
#[derive(Debug, Clone, Copy)]
pub struct StatVars {
    pub mu: Var,
    pub var: Var,
}

impl StatVars {
    pub fn values(&self, tape: &Tape) -> LayerStats {
        LayerStats {
            mu: tape.value(self.mu).clone(),
            var: tape.value(self.var).clone(),
        }
    }
}

/// How the forward pass draws noise.
pub enum Mode<'a> {
    /// Fresh ε ~ N(0, I) at every sampling site.
    Train(&'a mut SeededRng),
    /// ε = 0: every sample is its mean.
    Deterministic,
}

impl Mode<'_> {
    fn noise(&mut self, shape: &[usize]) -> Option<Tensor> {
        match self {
            Mode::Train(rng) => {
                let n = shape.iter().product();
                Some(Tensor::new(shape.to_vec(), rng.normals(n)).expect("noise shape"))
            }
            Mode::Deterministic => None,
        }
    }
}

/// Bottom-up statistics. `rungs[i]` is `None` for middle rungs of a model
/// without ladder merging.
#[derive(Debug, Clone)]
pub struct Upward {
    pub rungs: Vec<Option<StatVars>>,
    pub top: StatVars,
}

#[derive(Debug, Clone)]
pub struct Downward {
    /// Top-down statistics for the middle rungs, indexed by rung.
    pub down: Vec<StatVars>,
    /// Statistics actually sampled from at each middle rung.
    pub merged: Vec<StatVars>,
    /// Value handed down from each middle rung.
    pub samples: Vec<Var>,
    pub recon: Var,
}

/// Tape-level record of one forward pass.
#[derive(Debug, Clone)]
pub struct TraceVars {
    pub upward: Upward,
    pub z: Var,
    pub logits: Var,
    pub downward: Downward,
}

/// Plain-value record of one forward pass. `upward` has one entry per rung
/// (the last being the latent statistics); `downward` and `merged` cover the
/// L-1 middle rungs, since the top rung has no top-down statistics.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub upward: Vec<Option<LayerStats>>,
    pub downward: Vec<LayerStats>,
    pub merged: Vec<LayerStats>,
    pub top: LayerStats,
    pub z: Tensor,
    pub recon: Tensor,
    pub logits: Tensor,
}

impl ForwardTrace {
    fn from_vars(tape: &Tape, t: &TraceVars) -> Self {
        ForwardTrace {
            upward: t.upward.rungs.iter().map(|r| r.map(|s| s.values(tape))).collect(),
            downward: t.downward.down.iter().map(|s| s.values(tape)).collect(),
            merged: t.downward.merged.iter().map(|s| s.values(tape)).collect(),
            top: t.upward.top.values(tape),
            z: tape.value(t.z).clone(),
            recon: tape.value(t.downward.recon).clone(),
            logits: tape.value(t.logits).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Heads {
    mu: Dense,
    var: Dense,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Rung {
    transform: Dense,
    prelu: usize,
    heads: Option<Heads>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    encoder: Vec<Rung>,
    decoder: Vec<Rung>,
    output: Dense,
    classifier: Dense,
    class_means: usize,
}

/// Bias giving softplus(bias) = 1, so fresh variance heads start near unit variance.
pub const UNIT_VARIANCE_BIAS: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone, PartialEq)]
pub struct LadderModel {
    config: LadderConfig,
    params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    rng: &'a mut SeededRng,
    store: ParamStore,
}

impl Init<'_> {
    fn gaussian(&mut self, name: String, shape: &[usize], var: f64) -> usize {
        let n = shape.iter().product();
        let sd = var.sqrt();
        let data = (0..n).map(|_| sd * self.rng.normal()).collect();
        self.store.push(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.store.push(name, Tensor::filled(shape, value))
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, weight_var: f64, bias: f64) -> Dense {
        Dense {
            w: self.gaussian(format!("{name}.w"), &[fan_in, fan_out], weight_var),
            b: self.constant(format!("{name}.b"), &[fan_out], bias),
        }
    }

    fn heads(&mut self, name: &str, fan_in: usize, out: usize) -> Heads {
        let v = 1.0 / fan_in as f64;
        Heads {
            mu: self.dense(&format!("{name}.mu"), fan_in, out, v, 0.0),
            var: self.dense(&format!("{name}.var"), fan_in, out, v, UNIT_VARIANCE_BIAS),
        }
    }
}

impl LadderModel {
    /// Fresh model with seeded initialization.
    pub fn new(config: LadderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed).split(0x1417);
        let mut init = Init {
            rng: &mut rng,
            store: ParamStore::new(),
        };
        let l = config.rungs();
        let mut encoder = Vec::with_capacity(l);
        let mut fan_in = config.input_dim;
        for i in 0..l {
            let width = config.layer_dims[i];
            let name = format!("enc.{i}");
            let transform = init.dense(&name, fan_in, width, 2.0 / fan_in as f64, 0.0);
            let prelu = init.constant(format!("{name}.prelu"), &[1], config.prelu_init);
            let heads = (i + 1 == l || config.ladder).then(|| init.heads(&name, width, config.stat_dim(i)));
            encoder.push(Rung { transform, prelu, heads });
            fan_in = width;
        }
        let mut decoder = Vec::with_capacity(l.saturating_sub(1));
        for i in 0..l - 1 {
            let name = format!("dec.{i}");
            let fan_in = config.stat_dim(i + 1);
            let width = config.layer_dims[i];
            let transform = init.dense(&name, fan_in, width, 2.0 / fan_in as f64, 0.0);
            let prelu = init.constant(format!("{name}.prelu"), &[1], config.prelu_init);
            let heads = Some(init.heads(&name, width, config.stat_dim(i)));
            decoder.push(Rung { transform, prelu, heads });
        }
        let s0 = config.stat_dim(0);
        let output = init.dense("out", s0, config.input_dim, 1.0 / s0 as f64, 0.0);
        let j = config.latent_dim;
        let classifier = init.dense("cls", j, config.num_classes, 1.0 / j as f64, 0.0);
        let class_means = init.gaussian("class_means".into(), &[config.num_classes, j], 1.0);
        let layout = Layout {
            encoder,
            decoder,
            output,
            classifier,
            class_means,
        };
        Ok(LadderModel {
            config,
            params: init.store,
            layout,
        })
    }

    pub fn config(&self) -> &LadderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn bind(&self, tape: &mut Tape, slot: usize, grads: bool) -> Var {
        if grads {
            tape.param(&self.params, slot)
        } else {
            tape.constant(self.params.value(slot).clone())
        }
    }

    fn dense(&self, tape: &mut Tape, x: Var, d: Dense, grads: bool) -> Result<Var> {
        let w = self.bind(tape, d.w, grads);
        let b = self.bind(tape, d.b, grads);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    fn rung_features(&self, tape: &mut Tape, x: Var, rung: &Rung, grads: bool) -> Result<Var> {
        let a = self.dense(tape, x, rung.transform, grads)?;
        let slope = self.bind(tape, rung.prelu, grads);
        tape.prelu(a, slope)
    }

    fn heads(&self, tape: &mut Tape, h: Var, heads: Heads, grads: bool) -> Result<StatVars> {
        let mu = self.dense(tape, h, heads.mu, grads)?;
        let pre = self.dense(tape, h, heads.var, grads)?;
        let var = tape.softplus(pre)?;
        Ok(StatVars { mu, var })
    }

    /// Bottom-up pass producing per-rung Gaussian statistics.
    pub fn encode_upward(&self, tape: &mut Tape, x: Var, grads: bool) -> Result<Upward> {
        let (_, cols) = tape.value(x).dims2()?;
        if cols != self.config.input_dim {
            return Err(Error::dim(
                "encode_upward",
                format!("input has {cols} features, model expects {}", self.config.input_dim),
            ));
        }
        let mut h = x;
        let mut rungs = Vec::with_capacity(self.config.rungs());
        for rung in &self.layout.encoder {
            h = self.rung_features(tape, h, rung, grads)?;
            rungs.push(match rung.heads {
                Some(heads) => Some(self.heads(tape, h, heads, grads)?),
                None => None,
            });
        }
        let top = rungs
            .last()
            .copied()
            .flatten()
            .expect("top rung always has heads");
        Ok(Upward { rungs, top })
    }

    /// Top-down pass from the latent code `z` to the reconstruction. With
    /// `upward` present, each middle rung samples from the precision-weighted
    /// merge of its bottom-up and top-down statistics; otherwise from its
    /// top-down statistics alone.
    pub fn decode_downward(
        &self,
        tape: &mut Tape,
        z: Var,
        upward: Option<&Upward>,
        mode: &mut Mode<'_>,
        grads: bool,
    ) -> Result<Downward> {
        let l = self.config.rungs();
        let mut down = vec![None; l - 1];
        let mut merged = vec![None; l - 1];
        let mut samples = vec![None; l - 1];
        let mut cur = z;
        for i in (0..l - 1).rev() {
            let rung = &self.layout.decoder[i];
            let t = self.rung_features(tape, cur, rung, grads)?;
            let top_down = self.heads(tape, t, rung.heads.expect("decoder heads"), grads)?;
            let bottom_up = upward.and_then(|u| u.rungs[i]);
            let q = match bottom_up {
                Some(up) => precision_merge_vars(tape, up, top_down)?,
                None => top_down,
            };
            cur = sample(tape, q, mode)?;
            down[i] = Some(top_down);
            merged[i] = Some(q);
            samples[i] = Some(cur);
        }
        let logits = self.dense(tape, cur, self.layout.output, grads)?;
        let recon = tape.sigmoid(logits)?;
        Ok(Downward {
            down: down.into_iter().map(Option::unwrap).collect(),
            merged: merged.into_iter().map(Option::unwrap).collect(),
            samples: samples.into_iter().map(Option::unwrap).collect(),
            recon,
        })
    }

    /// Classifier logits for latent codes `z`.
    pub fn classifier_logits(&self, tape: &mut Tape, z: Var, grads: bool) -> Result<Var> {
        self.dense(tape, z, self.layout.classifier, grads)
    }

    /// Class means for each label, as a `[batch, latent_dim]` matrix obtained
    /// by multiplying one-hot label rows with the embedding matrix.
    pub fn class_means_for(&self, tape: &mut Tape, labels: &[usize], grads: bool) -> Result<Var> {
        let k = self.config.num_classes;
        let mut onehot = vec![0.0; labels.len() * k];
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index {
                    what: "classes",
                    index: label,
                    len: k,
                });
            }
            onehot[r * k + label] = 1.0;
        }
        let onehot = tape.constant(Tensor::new(vec![labels.len(), k], onehot)?);
        let m = self.bind(tape, self.layout.class_means, grads);
        tape.matmul(onehot, m)
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: &mut Mode<'_>, grads: bool) -> Result<TraceVars> {
        let xv = tape.constant(x.clone());
        let upward = self.encode_upward(tape, xv, grads)?;
        let z = sample(tape, upward.top, mode)?;
        let logits = self.classifier_logits(tape, z, grads)?;
        let use_merge = self.config.ladder.then_some(&upward);
        let downward = self.decode_downward(tape, z, use_merge, mode, grads)?;
        Ok(TraceVars {
            upward,
            z,
            logits,
            downward,
        })
    }

    /// Forward pass on plain values, without gradient bookkeeping.
    pub fn forward_values(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let t = self.forward(&mut tape, x, mode, false)?;
        Ok(ForwardTrace::from_vars(&tape, &t))
    }

    /// Class-mean embedding, one row per class.
    pub fn class_means(&self) -> &Tensor {
        self.params.value(self.layout.class_means)
    }

    pub fn mean_of(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.config.num_classes {
            return Err(Error::Index {
                what: "classes",
                index: k,
                len: self.config.num_classes,
            });
        }
        Ok(self.class_means().row(k).to_vec())
    }

    /// Class probabilities for latent codes `z`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let logits = self.classifier_logits(&mut tape, zv, false)?;
        softmax_rows(tape.value(logits))
    }

    /// Replaces parameters with `values`, matched by name and shape.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let slot = self
                .params
                .slot(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.params.value(slot).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.params.value(slot).shape()
                )));
            }
            *self.params.value_mut(slot) = value.clone();
        }
        Ok(())
    }

    /// `(name, value)` pairs for every parameter, in registration order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .names()
            .iter()
            .cloned()
            .zip(self.params.values().iter().cloned())
            .collect()
    }
}

/// Deterministic test-time outputs for a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Latent codes (the top-rung means), `[n, latent_dim]`.
    pub z: Tensor,
    /// Class probabilities, `[n, num_classes]`.
    pub probs: Tensor,
    /// Per-sample L1 reconstruction error.
    pub recon_error: Vec<f64>,
}

impl Inference {
    pub fn len(&self) -> usize {
        self.recon_error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recon_error.is_empty()
    }

    pub fn predicted(&self, i: usize) -> usize {
        argmax(self.probs.row(i))
    }

    pub fn max_prob(&self, i: usize) -> f64 {
        self.probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const INFER_CHUNK: usize = 512;

impl LadderModel {
    /// Runs the deterministic forward pass over all rows of `x` in chunks.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        let (n, d) = x.dims2()?;
        if d != self.config.input_dim {
            return Err(Error::dim(
                "infer",
                format!("input has {d} features, model expects {}", self.config.input_dim),
            ));
        }
        let (j, k) = (self.config.latent_dim, self.config.num_classes);
        let mut z = Vec::with_capacity(n * j);
        let mut probs = Vec::with_capacity(n * k);
        let mut recon_error = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = x.slice_rows(start, end)?;
            let t = self.forward_values(&chunk, &mut Mode::Deterministic)?;
            z.extend_from_slice(t.z.data());
            probs.extend_from_slice(softmax_rows(&t.logits)?.data());
            for r in 0..end - start {
                recon_error.push(chunk.row(r).iter().zip(t.recon.row(r)).map(|(a, b)| (a - b).abs()).sum());
            }
            start = end;
        }
        if n == 0 {
            return Ok(Inference {
                z: Tensor::zeros(&[0, j]),
                probs: Tensor::zeros(&[0, k]),
                recon_error,
            });
        }
        Ok(Inference {
            z: Tensor::new(vec![n, j], z)?,
            probs: Tensor::new(vec![n, k], probs)?,
            recon_error,
        })
    }
}

fn sample(tape: &mut Tape, s: StatVars, mode: &mut Mode<'_>) -> Result<Var> {
    match mode.noise(tape.value(s.mu).shape()) {
        Some(eps) => {
            let e = tape.constant(eps);
            reparameterize_vars(tape, s.mu, s.var, e)
        }
        None => Ok(s.mu),
    }
}

/// `mu + sqrt(var) ⊙ eps` on the tape.
pub fn reparameterize_vars(tape: &mut Tape, mu: Var, var: Var, eps: Var) -> Result<Var> {
    let sd = tape.sqrt(var)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(mu, noise)
}

pub fn reparameterize(mu: &Tensor, var: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (m, v, e) = (tape.constant(mu.clone()), tape.constant(var.clone()), tape.constant(eps.clone()));
    let z = reparameterize_vars(&mut tape, m, v, e)?;
    Ok(tape.value(z).clone())
}

/// Inverse-variance weighted combination of bottom-up and top-down statistics.
pub fn precision_merge_vars(tape: &mut Tape, up: StatVars, down: StatVars) -> Result<StatVars> {
    for v in [up.var, down.var] {
        if tape.value(v).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("precision_merge", "variance must be positive"));
        }
    }
    let prec_up = tape.recip(up.var)?;
    let prec_down = tape.recip(down.var)?;
    let prec = tape.add(prec_down, prec_up)?;
    let var = tape.recip(prec)?;
    let a = tape.mul(down.mu, prec_down)?;
    let b = tape.mul(up.mu, prec_up)?;
    let num = tape.add(a, b)?;
    let mu = tape.mul(num, var)?;
    Ok(StatVars { mu, var })
}

pub fn precision_merge(up: &LayerStats, down: &LayerStats) -> Result<LayerStats> {
    if up.mu.shape() != down.mu.shape() {
        return Err(Error::dim("precision_merge", "bottom-up and top-down shapes differ"));
    }
    let mut tape = Tape::new();
    let u = StatVars {
        mu: tape.constant(up.mu.clone()),
        var: tape.constant(up.var.clone()),
    };
    let d = StatVars {
        mu: tape.constant(down.mu.clone()),
        var: tape.constant(down.var.clone()),
    };
    Ok(precision_merge_vars(&mut tape, u, d)?.values(&tape))
}
