//! Seeded SGD training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{LadderModel, Mode};
use crate::numerics::{SeededRng, Tape, Tensor};
use crate::objective::{beta_schedule, total_loss_vars, LossBreakdown, LossWeights};

fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    200
}
fn default_lambda() -> f64 {
    100.0
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub momentum: f64,
    /// Weight of the reconstruction term. 0 together with `beta_max = 0`
    /// trains the encoder and classifier only.
    #[serde(default = "default_one")]
    pub recon_weight: f64,
    /// Final value of the annealed KL weight.
    #[serde(default = "default_one")]
    pub beta_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            lambda: default_lambda(),
            seed: 0,
            checkpoint_every: 0,
            momentum: 0.0,
            recon_weight: 1.0,
            beta_max: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite nonnegative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite nonnegative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return bad("recon_weight must be a finite nonnegative number");
        }
        if !(0.0..=1.0).contains(&self.beta_max) {
            return bad("beta_max must lie in [0, 1]");
        }
        Ok(())
    }

    /// KL weight for a 0-based epoch: 0 at the first epoch, `beta_max` at the last.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        self.beta_max * beta_schedule(epoch, self.epochs.saturating_sub(1).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    /// Sample-weighted means of the per-batch breakdowns.
    pub loss: LossBreakdown,
    pub closed_set_train_accuracy: f64,
    pub wall_time: f64,
}

impl TrainLogEntry {
    pub const CSV_HEADER: &'static str = "epoch,recon,kl_latent,kl_layers_sum,ce,beta,total,train_accuracy";

    /// One CSV row; wall time is left out so logs are reproducible.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            l.recon,
            l.kl_latent,
            l.kl_layers_sum(),
            l.ce,
            l.beta,
            l.total,
            self.closed_set_train_accuracy
        )
    }
}

/// Plain gradient step `p ← p − lr·g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::contract("sgd_step", "gradient length differs from parameter"));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.data_mut().iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(())
}

/// Fraction of rows whose deterministic prediction equals the label.
pub fn closed_set_accuracy(model: &LadderModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let inf = model.infer(x)?;
    Ok(accuracy(&(0..inf.len()).map(|i| inf.predicted(i)).collect::<Vec<_>>(), labels))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn accumulate(sum: &mut Option<LossBreakdown>, b: &LossBreakdown, w: f64) {
    match sum {
        None => {
            let mut s = b.clone();
            s.recon *= w;
            s.kl_latent *= w;
            s.kl_layers.iter_mut().for_each(|v| *v *= w);
            s.ce *= w;
            s.total *= w;
            *sum = Some(s);
        }
        Some(s) => {
            s.recon += w * b.recon;
            s.kl_latent += w * b.kl_latent;
            s.kl_layers.iter_mut().zip(&b.kl_layers).for_each(|(a, v)| *a += w * v);
            s.ce += w * b.ce;
            s.total += w * b.total;
        }
    }
}

/// Called after each epoch with the 1-based epoch number when
/// `checkpoint_every` divides it.
pub type CheckpointHook<'a> = dyn FnMut(usize, &LadderModel) -> Result<()> + 'a;

/// Trains `model` in place on rows of `x` with labels `labels`.
///
/// Each epoch shuffles with a generator derived from `(seed, epoch)` and draws
/// the reparameterization noise from the same stream, so identical inputs
/// always produce identical parameters.
pub fn train(
    model: &mut LadderModel,
    x: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    mut checkpoint: Option<&mut CheckpointHook<'_>>,
) -> Result<Vec<TrainLogEntry>> {
    config.validate()?;
    let (n, _) = x.dims2()?;
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {n} samples", labels.len())));
    }
    let k = model.config().num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("label {bad} outside [0, {k})")));
    }

    let root = SeededRng::new(config.seed);
    let mut velocity: Vec<Vec<f64>> = model.params().grads().iter().map(|g| vec![0.0; g.len()]).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = root.split(epoch as u64);
        order.sort_unstable();
        rng.shuffle(&mut order);
        let weights = LossWeights {
            beta: config.beta_at(epoch),
            lambda: config.lambda,
            recon_weight: config.recon_weight,
        };
        let mut sum: Option<LossBreakdown> = None;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let xb = x.select_rows(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let locate = |e: Error| match e {
                Error::NonFiniteValue { op } => Error::NonFinite {
                    term: format!("forward ({op})"),
                    epoch,
                    batch: batch_idx,
                },
                Error::NonFinite { term, .. } => Error::NonFinite {
                    term,
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            };

            let mut tape = Tape::new();
            let trace = model.forward(&mut tape, &xb, &mut Mode::Train(&mut rng), true).map_err(locate)?;
            let xv = tape.constant(xb);
            let (loss, breakdown) =
                total_loss_vars(&mut tape, model, &trace, xv, &yb, weights, true).map_err(locate)?;
            if let Some(term) = breakdown.first_non_finite() {
                return Err(Error::NonFinite {
                    term,
                    epoch,
                    batch: batch_idx,
                });
            }
            accumulate(&mut sum, &breakdown, chunk.len() as f64 / n as f64);

            let params = model.params_mut();
            params.zero_grad();
            tape.backward(loss, params)?;
            let (grads, values) = params.grads_and_values_mut();
            if config.momentum > 0.0 {
                for (v, g) in velocity.iter_mut().zip(grads) {
                    v.iter_mut().zip(g).for_each(|(v, g)| *v = config.momentum * *v + g);
                }
                sgd_step(values, &velocity, config.learning_rate)?;
            } else {
                sgd_step(values, grads, config.learning_rate)?;
            }
        }

        let mut loss = sum.expect("at least one batch");
        loss.beta = weights.beta;
        let acc = closed_set_accuracy(model, x, labels)?;
        log.push(TrainLogEntry {
            epoch: epoch + 1,
            loss,
            closed_set_train_accuracy: acc,
            wall_time: started.elapsed().as_secs_f64(),
        });
        if let Some(hook) = checkpoint.as_mut() {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                hook(epoch + 1, model)?;
            }
        }
    }
    Ok(log)
}
