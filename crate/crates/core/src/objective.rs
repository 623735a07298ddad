//! Loss terms and the total training objective.
//!
//! Every term is nonnegative and the optimizer minimizes
//! `w_r·recon + β·(kl_latent + Σ kl_layers)/n_kl + λ·ce`, where `n_kl` is the
//! number of KL terms (one per rung for a ladder model).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{LadderModel, LayerStats, StatVars, TraceVars};
use crate::numerics::{Tape, Tensor, Var};

/// Mean over the batch of the per-sample L1 distance between input and reconstruction.
pub fn recon_l1_vars(tape: &mut Tape, x: Var, recon: Var) -> Result<Var> {
    let (batch, _) = tape.value(x).dims2()?;
    let diff = tape.sub(x, recon)?;
    let abs = tape.abs(diff)?;
    let total = tape.sum(abs)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// Per-sample L1 distances between rows of `x` and `recon`.
pub fn per_sample_l1(x: &Tensor, recon: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != recon.shape() {
        return Err(Error::dim("recon_l1", format!("{:?} vs {:?}", x.shape(), recon.shape())));
    }
    let (rows, _) = x.dims2()?;
    Ok((0..rows)
        .map(|r| x.row(r).iter().zip(recon.row(r)).map(|(a, b)| (a - b).abs()).sum())
        .collect())
}

pub fn recon_l1(x: &Tensor, recon: &Tensor) -> Result<f64> {
    if x.shape() != recon.shape() {
        return Err(Error::dim("recon_l1", format!("{:?} vs {:?}", x.shape(), recon.shape())));
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(recon.clone()));
    let l = recon_l1_vars(&mut tape, a, b)?;
    Ok(tape.value(l).data()[0])
}

fn batch_of(tape: &Tape, v: Var) -> usize {
    let s = tape.value(v).shape();
    if s.len() == 2 {
        s[0]
    } else {
        1
    }
}

fn require_positive(tape: &Tape, v: Var, op: &'static str) -> Result<()> {
    if tape.value(v).data().iter().any(|&x| x.is_nan() || x <= 0.0) {
        return Err(Error::contract(op, "variance must be positive"));
    }
    Ok(())
}

/// `KL(N(mu, var) ‖ N(mu_k, I))`, summed over latent dimensions and averaged over the batch.
pub fn kl_conditional_vars(tape: &mut Tape, mu: Var, var: Var, mu_k: Var) -> Result<Var> {
    require_positive(tape, var, "kl_conditional")?;
    let batch = batch_of(tape, mu);
    let d = tape.sub(mu, mu_k)?;
    let d2 = tape.square(d)?;
    let log_var = tape.log(var)?;
    // var + d² - 1 - log var, elementwise
    let a = tape.add(var, d2)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(c)?;
    tape.scale(s, 0.5 / batch as f64)
}

pub fn kl_conditional(mu: &Tensor, var: &Tensor, mu_k: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (m, v, k) = (
        tape.constant(mu.clone()),
        tape.constant(var.clone()),
        tape.constant(mu_k.clone()),
    );
    let l = kl_conditional_vars(&mut tape, m, v, k)?;
    Ok(tape.value(l).data()[0])
}

/// `KL(N(p) ‖ N(q))` for diagonal Gaussians, summed over dimensions and
/// averaged over the batch. In the objective `p` is the merged posterior of a
/// rung and `q` its top-down statistics.
pub fn kl_gaussian_pair_vars(tape: &mut Tape, p: StatVars, q: StatVars) -> Result<Var> {
    require_positive(tape, p.var, "kl_gaussian_pair")?;
    require_positive(tape, q.var, "kl_gaussian_pair")?;
    let batch = batch_of(tape, p.mu);
    let log_q = tape.log(q.var)?;
    let log_p = tape.log(p.var)?;
    let log_ratio = tape.sub(log_q, log_p)?;
    let half_log = tape.scale(log_ratio, 0.5)?;
    let d = tape.sub(p.mu, q.mu)?;
    let d2 = tape.square(d)?;
    let num = tape.add(p.var, d2)?;
    let twice_q = tape.scale(q.var, 2.0)?;
    let frac = tape.div(num, twice_q)?;
    let a = tape.add(half_log, frac)?;
    let b = tape.add_scalar(a, -0.5)?;
    let s = tape.sum(b)?;
    tape.scale(s, 1.0 / batch as f64)
}

pub fn kl_gaussian_pair(p: &LayerStats, q: &LayerStats) -> Result<f64> {
    if p.mu.shape() != q.mu.shape() {
        return Err(Error::dim("kl_gaussian_pair", "statistics shapes differ"));
    }
    let mut tape = Tape::new();
    let pv = StatVars {
        mu: tape.constant(p.mu.clone()),
        var: tape.constant(p.var.clone()),
    };
    let qv = StatVars {
        mu: tape.constant(q.mu.clone()),
        var: tape.constant(q.var.clone()),
    };
    let l = kl_gaussian_pair_vars(&mut tape, pv, qv)?;
    Ok(tape.value(l).data()[0])
}

fn onehot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Index {
                what: "classes",
                index: label,
                len: k,
            });
        }
        data[r * k + label] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Softmax cross-entropy from logits, averaged over the batch.
pub fn cross_entropy_vars(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, k) = tape.value(logits).dims2()?;
    if labels.len() != batch {
        return Err(Error::dim("cross_entropy", format!("{} labels for {batch} rows", labels.len())));
    }
    let oh = tape.constant(onehot(labels, k)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, oh)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / batch as f64)
}

pub fn cross_entropy_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = cross_entropy_vars(&mut tape, l, labels)?;
    Ok(tape.value(ce).data()[0])
}

/// Cross-entropy of probability rows against labels.
pub fn cross_entropy_probs(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, k) = probs.dims2()?;
    if labels.len() != batch {
        return Err(Error::dim("cross_entropy", format!("{} labels for {batch} rows", labels.len())));
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Index {
                what: "classes",
                index: label,
                len: k,
            });
        }
        total -= probs.row(r)[label].ln();
    }
    Ok(total / batch as f64)
}

/// Linear KL annealing weight: `epoch / total_epochs` clamped to `[0, 1]`.
pub fn beta_schedule(epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return 1.0;
    }
    (epoch as f64 / total_epochs as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    pub recon_weight: f64,
}

impl LossWeights {
    pub fn new(beta: f64, lambda: f64) -> Self {
        LossWeights {
            beta,
            lambda,
            recon_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_latent: f64,
    pub kl_layers: Vec<f64>,
    pub ce: f64,
    pub beta: f64,
    pub lambda: f64,
    pub recon_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn kl_layers_sum(&self) -> f64 {
        self.kl_layers.iter().sum()
    }

    /// Mean over the KL terms present.
    pub fn kl_average(&self) -> f64 {
        (self.kl_latent + self.kl_layers_sum()) / (1 + self.kl_layers.len()) as f64
    }

    /// The total rebuilt from the components.
    pub fn recomputed_total(&self) -> f64 {
        self.recon_weight * self.recon + self.beta * self.kl_average() + self.lambda * self.ce
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.recon.is_finite() {
            return Some("recon".into());
        }
        if !self.kl_latent.is_finite() {
            return Some("kl_latent".into());
        }
        if let Some(i) = self.kl_layers.iter().position(|v| !v.is_finite()) {
            return Some(format!("kl_layers[{i}]"));
        }
        if !self.ce.is_finite() {
            return Some("ce".into());
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

/// Wraps a term computation so non-finite intermediate values are reported
/// under the term's name.
fn term<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        Error::NonFiniteValue { op } => Error::NonFinite {
            term: format!("{name} ({op})"),
            epoch: 0,
            batch: 0,
        },
        other => other,
    })
}

/// Records the total objective for a forward trace and returns the loss
/// handle together with its breakdown.
pub fn total_loss_vars(
    tape: &mut Tape,
    model: &LadderModel,
    trace: &TraceVars,
    x: Var,
    labels: &[usize],
    weights: LossWeights,
    grads: bool,
) -> Result<(Var, LossBreakdown)> {
    let recon = term("recon", || recon_l1_vars(tape, x, trace.downward.recon))?;
    let kl_latent = term("kl_latent", || {
        let mu_k = model.class_means_for(tape, labels, grads)?;
        kl_conditional_vars(tape, trace.upward.top.mu, trace.upward.top.var, mu_k)
    })?;
    let mut kl_layers = Vec::new();
    if model.config().ladder {
        for (i, (q, p)) in trace.downward.merged.iter().zip(&trace.downward.down).enumerate() {
            kl_layers.push(term(&format!("kl_layers[{i}]"), || kl_gaussian_pair_vars(tape, *q, *p))?);
        }
    }
    let ce = term("ce", || cross_entropy_vars(tape, trace.logits, labels))?;

    let total = term("total", || {
        let mut kl_sum = kl_latent;
        for &k in &kl_layers {
            kl_sum = tape.add(kl_sum, k)?;
        }
        let kl_avg = tape.scale(kl_sum, 1.0 / (1 + kl_layers.len()) as f64)?;
        let r = tape.scale(recon, weights.recon_weight)?;
        let k = tape.scale(kl_avg, weights.beta)?;
        let c = tape.scale(ce, weights.lambda)?;
        let rk = tape.add(r, k)?;
        tape.add(rk, c)
    })?;

    let scalar = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        recon: scalar(recon),
        kl_latent: scalar(kl_latent),
        kl_layers: kl_layers.iter().map(|&v| scalar(v)).collect(),
        ce: scalar(ce),
        beta: weights.beta,
        lambda: weights.lambda,
        recon_weight: weights.recon_weight,
        total: scalar(total),
    };
    Ok((total, breakdown))
}
