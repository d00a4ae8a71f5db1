//! FedAvg training of a linear softmax probe over embeddings, and the
//! gradient-dispersion drift measure.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::error::{Result, ScopeError};

/// A labeled feature vector borrowed from a record or test set.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Peak learning rate; decays with a cosine schedule over rounds.
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of non-empty clients sampled each round.
    pub participation: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            rounds: 50,
            local_epochs: 1,
            lr: 2.0,
            batch_size: 32,
            participation: 1.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ScopeError::Config(format!("probe: {msg}")));
        if self.local_epochs < 1 {
            return fail("local_epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            ));
        }
        Ok(())
    }
}

/// Row-major `classes x dim` weights plus one bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearProbe {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[c]
            })
            .collect()
    }

    /// Arg-max class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> u32 {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn accuracy(&self, test: &[Sample]) -> f64 {
        if test.is_empty() {
            return 0.0;
        }
        let hits = test.iter().filter(|s| self.predict(s.x) == s.y).count();
        hits as f64 / test.len() as f64
    }

    /// Mean cross-entropy gradient over `batch`, flattened as weights then bias.
    pub fn gradient(&self, batch: &[Sample]) -> Vec<f64> {
        let mut grad = vec![0.0; self.classes * self.dim + self.classes];
        if batch.is_empty() {
            return grad;
        }
        for s in batch {
            let logits = self.logits(s.x);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for c in 0..self.classes {
                let delta = exp[c] / z - if c as u32 == s.y { 1.0 } else { 0.0 };
                let row = &mut grad[c * self.dim..(c + 1) * self.dim];
                row.iter_mut().zip(s.x).for_each(|(g, v)| *g += delta * v);
                grad[self.classes * self.dim + c] += delta;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        grad
    }

    fn step(&mut self, grad: &[f64], lr: f64) {
        let split = self.classes * self.dim;
        self.weights
            .iter_mut()
            .zip(&grad[..split])
            .for_each(|(w, g)| *w -= lr * g);
        self.bias
            .iter_mut()
            .zip(&grad[split..])
            .for_each(|(b, g)| *b -= lr * g);
    }
}

fn cosine_lr(peak: f64, round: usize, rounds: usize) -> f64 {
    0.5 * peak * (1.0 + (std::f64::consts::PI * round as f64 / rounds as f64).cos())
}

fn local_train(
    global: &LinearProbe,
    shard: &[Sample],
    config: &ProbeConfig,
    lr: f64,
    round: usize,
    client: usize,
) -> LinearProbe {
    let mut model = global.clone();
    let mut rng = rng_for(config.seed, ((round as u64) << 32) | client as u64);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| shard[i]).collect();
            let g = model.gradient(&batch);
            model.step(&g, lr);
        }
    }
    model
}

/// Federated averaging from a zero model. Returns held-out accuracy before
/// training and after each round (`rounds + 1` entries).
pub fn fedavg_probe(
    shards: &[Vec<Sample>],
    test: &[Sample],
    classes: usize,
    config: &ProbeConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let active: Vec<usize> = (0..shards.len())
        .filter(|&k| !shards[k].is_empty())
        .collect();
    if active.is_empty() {
        return Err(ScopeError::EmptyCoreset);
    }
    let dim = shards[active[0]][0].x.len();
    let mut model = LinearProbe::zeros(classes, dim);
    let mut curve = vec![model.accuracy(test)];
    let per_round = ((config.participation * active.len() as f64).round() as usize).max(1);

    for round in 0..config.rounds {
        let lr = cosine_lr(config.lr, round, config.rounds);
        let mut chosen = active.clone();
        if per_round < chosen.len() {
            chosen.shuffle(&mut rng_for(config.seed, 0x5041_5254_4943 ^ round as u64));
            chosen.truncate(per_round);
            chosen.sort_unstable();
        }
        let locals: Vec<(LinearProbe, usize)> = chosen
            .par_iter()
            .map(|&k| {
                (
                    local_train(&model, &shards[k], config, lr, round, k),
                    shards[k].len(),
                )
            })
            .collect();

        let total: usize = locals.iter().map(|(_, n)| n).sum();
        let mut next = LinearProbe::zeros(classes, dim);
        for (local, n) in &locals {
            let w = *n as f64 / total as f64;
            next.weights
                .iter_mut()
                .zip(&local.weights)
                .for_each(|(a, b)| *a += w * b);
            next.bias
                .iter_mut()
                .zip(&local.bias)
                .for_each(|(a, b)| *a += w * b);
        }
        model = next;
        curve.push(model.accuracy(test));
    }
    Ok(curve)
}

/// Mean squared distance of per-client full-batch gradients from their
/// average, evaluated at `model`. Empty shards are skipped.
pub fn drift_proxy(shards: &[Vec<Sample>], model: &LinearProbe) -> f64 {
    let grads: Vec<Vec<f64>> = shards
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| model.gradient(s))
        .collect();
    if grads.is_empty() {
        return 0.0;
    }
    let k = grads.len() as f64;
    let mut mean = vec![0.0; grads[0].len()];
    for g in &grads {
        mean.iter_mut().zip(g).for_each(|(m, x)| *m += x / k);
    }
    grads
        .iter()
        .map(|g| {
            g.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / k
}
