//! Long-tailed class counts and Dirichlet label-skew partitioning.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::error::{Result, ScopeError};

/// client id -> class id -> sample count. Every client id in `0..K` is present.
pub type Assignment = BTreeMap<u32, BTreeMap<u32, u64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: u32,
    pub num_classes: u32,
    pub dirichlet_alpha: f64,
    pub imbalance_ratio: f64,
    pub n_max: u64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ScopeError::Config(format!("partition: {msg}")));
        if self.num_clients < 1 {
            return fail(format!(
                "num_clients must be >= 1, got {}",
                self.num_clients
            ));
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return fail(format!(
                "dirichlet_alpha must be finite and > 0, got {}",
                self.dirichlet_alpha
            ));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return fail(format!(
                "imbalance_ratio must be finite and >= 1, got {}",
                self.imbalance_ratio
            ));
        }
        if (self.n_max as f64) < self.imbalance_ratio {
            return fail(format!(
                "n_max ({}) must be >= imbalance_ratio ({}) so the tail class keeps a sample",
                self.n_max, self.imbalance_ratio
            ));
        }
        Ok(())
    }
}

/// Exponentially decaying class sizes from `n_max` down to `n_max / IR`.
pub fn longtail_counts(num_classes: u32, imbalance_ratio: f64, n_max: u64) -> Result<Vec<u64>> {
    PartitionConfig {
        num_clients: 1,
        num_classes,
        dirichlet_alpha: 1.0,
        imbalance_ratio,
        n_max,
        seed: 0,
    }
    .validate()?;
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| (n_max as f64 * imbalance_ratio.powf(-(c as f64) / last)).round() as u64)
        .collect())
}

/// Splits each class across `num_clients` with proportions drawn from a
/// symmetric Dirichlet, then assigns the samples multinomially.
pub fn dirichlet_partition(
    counts: &[u64],
    num_clients: u32,
    alpha: f64,
    seed: u64,
) -> Result<Assignment> {
    if num_clients < 1 {
        return Err(ScopeError::Config(
            "partition: num_clients must be >= 1".into(),
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ScopeError::Config(format!(
            "partition: dirichlet_alpha must be finite and > 0, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| ScopeError::Config(e.to_string()))?;
    let k = num_clients as usize;

    let mut out: Assignment = (0..num_clients).map(|c| (c, BTreeMap::new())).collect();
    for (class, &n_c) in counts.iter().enumerate() {
        let mut rng = rng_for(seed, 0x5041_5254_0000_0000 | class as u64);
        let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            // every gamma draw underflowed: all mass to one client
            let pick = rng.random_range(0..k);
            props = (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
        }

        let mut remaining_n = n_c;
        let mut remaining_p: f64 = props.iter().sum();
        for (client, &p) in props.iter().enumerate() {
            let take = if client + 1 == k || remaining_n == 0 {
                remaining_n
            } else {
                let q = if remaining_p > 0.0 {
                    (p / remaining_p).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                Binomial::new(remaining_n, q)
                    .map_err(|e| ScopeError::Config(e.to_string()))?
                    .sample(&mut rng)
            };
            remaining_n -= take;
            remaining_p -= p;
            if take > 0 {
                out.get_mut(&(client as u32))
                    .expect("client initialized")
                    .insert(class as u32, take);
            }
        }
    }
    Ok(out)
}
