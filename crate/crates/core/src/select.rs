//! Two-stage client-side coreset selection.
//!
//! Stage one ranks every local sample by its anomaly score and drops the top
//! `p_l` fraction. Stage two picks the locally over-represented, globally
//! common classes and, within each, drops the top `p_f` fraction by
//! redundancy score. Scores are standardized against the broadcast policy
//! and clipped into `[0, 1]` first.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aggregate::GlobalPolicy;
use crate::error::{Result, ScopeError};
use crate::scoring::ScoreTriple;

/// Pruning rates and targeting threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub p_l: f64,
    pub p_f: f64,
    pub beta: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            p_l: 0.1,
            p_f: 0.5,
            beta: 0.5,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_l) {
            return Err(ScopeError::Config(format!(
                "select: p_l must be in [0, 1), got {}",
                self.p_l
            )));
        }
        if !(0.0..1.0).contains(&self.p_f) {
            return Err(ScopeError::Config(format!(
                "select: p_f must be in [0, 1), got {}",
                self.p_f
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ScopeError::Config(format!(
                "select: beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Clipped z-scores in `[0, 1]`, ordered RS, DS, S_neg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizedScores {
    pub z_hat: [f64; 3],
}

impl StandardizedScores {
    pub fn rs(&self) -> f64 {
        self.z_hat[0]
    }
    pub fn ds(&self) -> f64 {
        self.z_hat[1]
    }
    pub fn s_neg(&self) -> f64 {
        self.z_hat[2]
    }
}

/// Maps a z-score onto `[0, 1]` with `±3σ` saturation.
pub fn clip_z(z: f64) -> f64 {
    ((z + 3.0) / 6.0).clamp(0.0, 1.0)
}

/// Standardizes against the class's global moments. A zero global
/// deviation gives `Z = 0`.
pub fn standardize(
    scores: &ScoreTriple,
    policy: &GlobalPolicy,
    class: u32,
) -> Result<StandardizedScores> {
    let cp = policy.class(class)?;
    let raw = scores.as_array();
    let mut z_hat = [0.0; 3];
    for m in 0..3 {
        let sigma = cp.variance[m].sqrt();
        let z = if sigma > 0.0 {
            (raw[m] - cp.mean[m]) / sigma
        } else {
            0.0
        };
        z_hat[m] = clip_z(z);
    }
    Ok(StandardizedScores { z_hat })
}

/// High when a sample sits closer to a wrong class than to its own.
pub fn anomaly_score(z: &StandardizedScores) -> f64 {
    z.s_neg() - z.rs()
}

/// High for prototypical samples with little diversity or boundary content.
pub fn redundancy_score(z: &StandardizedScores) -> f64 {
    z.rs() - z.s_neg() - z.ds()
}

/// `floor(p * n)`, with a 1e-9 guard so products like `0.29 * 100` round as written.
pub fn prune_count(p: f64, n: usize) -> usize {
    ((p * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Ids ordered by descending score, ascending id among equal scores.
fn rank_descending(scores: impl Iterator<Item = (u64, f64)>) -> Vec<u64> {
    let mut v: Vec<(u64, f64)> = scores.collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id).collect()
}

/// Drops the `floor(p_l * N)` highest anomaly scores. Returns `(kept, pruned)`.
pub fn consensus_filter(
    anomaly_scores: &BTreeMap<u64, f64>,
    p_l: f64,
) -> (BTreeSet<u64>, BTreeSet<u64>) {
    let ranked = rank_descending(anomaly_scores.iter().map(|(&id, &s)| (id, s)));
    let cut = prune_count(p_l, ranked.len());
    let pruned = ranked[..cut].iter().copied().collect();
    let kept = ranked[cut..].iter().copied().collect();
    (kept, pruned)
}

/// Classes whose targeting metric `f_c / W_c` is within a relative margin
/// `beta` of the local maximum.
pub fn targeting(
    policy: &GlobalPolicy,
    local_counts: &BTreeMap<u32, u64>,
    beta: f64,
    epsilon: f64,
) -> Result<BTreeSet<u32>> {
    let total: u64 = local_counts.values().sum();
    if total == 0 {
        return Ok(BTreeSet::new());
    }
    let mut metric = BTreeMap::new();
    for (&c, &n) in local_counts.iter().filter(|(_, &n)| n > 0) {
        let w = policy.class(c)?.weight;
        metric.insert(c, (n as f64 / total as f64) / w);
    }
    let max_t = metric.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(metric
        .into_iter()
        .filter(|(_, t)| (max_t - t) / (max_t + epsilon) <= beta)
        .map(|(c, _)| c)
        .collect())
}

/// Within each target class, drops the `floor(p_f * n_c)` most redundant
/// samples. `candidates` maps id to `(class, redundancy)`.
pub fn balance_filter(
    candidates: &BTreeMap<u64, (u32, f64)>,
    targets: &BTreeSet<u32>,
    p_f: f64,
) -> BTreeSet<u64> {
    let mut pruned = BTreeSet::new();
    for &class in targets {
        let ranked = rank_descending(
            candidates
                .iter()
                .filter(|(_, (c, _))| *c == class)
                .map(|(&id, &(_, r))| (id, r)),
        );
        let cut = prune_count(p_f, ranked.len());
        pruned.extend(&ranked[..cut]);
    }
    pruned
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    Kept,
    Noise,
    Redundant,
}

impl Disposition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Disposition::Kept => "kept",
            Disposition::Noise => "noise",
            Disposition::Redundant => "redundant",
        }
    }
}

/// Outcome of selection on one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetDecision {
    pub client_id: u32,
    pub kept: BTreeSet<u64>,
    pub pruned_noise: BTreeSet<u64>,
    pub pruned_redundant: BTreeSet<u64>,
    pub anomaly_scores: BTreeMap<u64, f64>,
    /// Only samples that were evaluated in stage two.
    pub redundancy_scores: BTreeMap<u64, f64>,
    pub target_classes: BTreeSet<u32>,
}

/// Per-class disposition counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispositionCounts {
    pub kept: usize,
    pub noise: usize,
    pub redundant: usize,
}

impl CoresetDecision {
    pub fn disposition(&self, id: u64) -> Option<Disposition> {
        if self.kept.contains(&id) {
            Some(Disposition::Kept)
        } else if self.pruned_noise.contains(&id) {
            Some(Disposition::Noise)
        } else if self.pruned_redundant.contains(&id) {
            Some(Disposition::Redundant)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len() + self.pruned_noise.len() + self.pruned_redundant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dispositions(&self) -> BTreeMap<u64, Disposition> {
        let mut out = BTreeMap::new();
        out.extend(self.kept.iter().map(|&id| (id, Disposition::Kept)));
        out.extend(self.pruned_noise.iter().map(|&id| (id, Disposition::Noise)));
        out.extend(
            self.pruned_redundant
                .iter()
                .map(|&id| (id, Disposition::Redundant)),
        );
        out
    }

    pub fn class_summary(&self, labels: &BTreeMap<u64, u32>) -> BTreeMap<u32, DispositionCounts> {
        let mut out: BTreeMap<u32, DispositionCounts> = BTreeMap::new();
        for (id, d) in self.dispositions() {
            if let Some(&c) = labels.get(&id) {
                let e = out.entry(c).or_default();
                match d {
                    Disposition::Kept => e.kept += 1,
                    Disposition::Noise => e.noise += 1,
                    Disposition::Redundant => e.redundant += 1,
                }
            }
        }
        out
    }

    /// Writes one `sample_id,disposition` line per sample, ascending id.
    pub fn write_dispositions<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, d) in self.dispositions() {
            writeln!(out, "{id},{}", d.as_str())?;
        }
        Ok(())
    }
}

/// Runs anomaly filtering, targeting, then redundancy balancing for one client.
///
/// `labels` and `scores` must cover the same sample ids. Every local class
/// must appear in the policy. Targeting uses the class frequencies of the
/// full local set and the policy's `epsilon`.
pub fn select_coreset(
    client_id: u32,
    labels: &BTreeMap<u64, u32>,
    scores: &BTreeMap<u64, ScoreTriple>,
    policy: &GlobalPolicy,
    config: &SelectConfig,
) -> Result<CoresetDecision> {
    config.validate()?;
    if let Some(id) = scores.keys().find(|id| !labels.contains_key(id)) {
        return Err(ScopeError::KeyMismatch(format!(
            "scored sample {id} has no label"
        )));
    }

    let mut standardized = BTreeMap::new();
    let mut local_counts: BTreeMap<u32, u64> = BTreeMap::new();
    for (&id, &class) in labels {
        let s = scores
            .get(&id)
            .ok_or(ScopeError::MissingScore { sample_id: id })?;
        let z = standardize(s, policy, class).map_err(|e| ScopeError::for_sample(id, e))?;
        standardized.insert(id, z);
        *local_counts.entry(class).or_default() += 1;
    }

    let anomaly_scores: BTreeMap<u64, f64> = standardized
        .iter()
        .map(|(&id, z)| (id, anomaly_score(z)))
        .collect();
    let (clean, pruned_noise) = consensus_filter(&anomaly_scores, config.p_l);

    let target_classes = targeting(policy, &local_counts, config.beta, policy.epsilon)?;

    let mut candidates = BTreeMap::new();
    for &id in &clean {
        let class = labels[&id];
        if target_classes.contains(&class) {
            candidates.insert(id, (class, redundancy_score(&standardized[&id])));
        }
    }
    let pruned_redundant = balance_filter(&candidates, &target_classes, config.p_f);
    let redundancy_scores = candidates.into_iter().map(|(id, (_, r))| (id, r)).collect();
    let kept = clean.difference(&pruned_redundant).copied().collect();

    Ok(CoresetDecision {
        client_id,
        kept,
        pruned_noise,
        pruned_redundant,
        anomaly_scores,
        redundancy_scores,
        target_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::ClassPolicy;

    fn z(rs: f64, ds: f64, s_neg: f64) -> StandardizedScores {
        StandardizedScores {
            z_hat: [rs, ds, s_neg],
        }
    }

    /// `(class, count, weight, mean, variance)`
    type Row = (u32, u64, f64, [f64; 3], [f64; 3]);

    fn policy_with(classes: &[Row]) -> GlobalPolicy {
        let total: u64 = classes.iter().map(|c| c.1).sum();
        GlobalPolicy {
            gamma: 1.0,
            epsilon: 1e-8,
            classes: classes
                .iter()
                .map(|&(c, n, w, mean, variance)| {
                    (
                        c,
                        ClassPolicy {
                            count: n,
                            frequency: n as f64 / total as f64,
                            weight: w,
                            mean,
                            variance,
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn standardize_examples() {
        let pol = policy_with(&[(0, 10, 1.0, [0.6, 0.6, 0.6], [0.01, 0.01, 0.0])]);
        let s = ScoreTriple {
            rs: 0.6,
            ds: 0.75,
            s_neg: 0.9,
        };
        let zs = standardize(&s, &pol, 0).unwrap();
        assert_eq!(zs.rs(), 0.5);
        assert!((zs.ds() - 0.75).abs() < 1e-12);
        // zero global variance maps to the neutral point
        assert_eq!(zs.s_neg(), 0.5);
        assert!(matches!(
            standardize(&s, &pol, 3),
            Err(ScopeError::UnknownClass { class: 3 })
        ));
        assert_eq!(clip_z(3.0), 1.0);
        assert_eq!(clip_z(-5.0), 0.0);
        assert_eq!(clip_z(0.0), 0.5);
    }

    #[test]
    fn score_formulas() {
        assert!((anomaly_score(&z(0.2, 0.0, 0.9)) - 0.7).abs() < 1e-15);
        assert_eq!(anomaly_score(&z(0.4, 0.1, 0.4)), 0.0);
        assert_eq!(anomaly_score(&z(0.5, 0.5, 0.5)), 0.0);
        assert_eq!(redundancy_score(&z(1.0, 0.0, 0.0)), 1.0);
        assert_eq!(redundancy_score(&z(0.5, 0.5, 0.5)), -0.5);
        assert!((redundancy_score(&z(0.8, 1.0, 0.1)) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn prune_count_floors() {
        assert_eq!(prune_count(0.1, 10), 1);
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(0.5, 5), 2);
        assert_eq!(prune_count(0.0, 7), 0);
        assert_eq!(prune_count(0.99, 1), 0);
    }

    #[test]
    fn consensus_examples() {
        let mut scores: BTreeMap<u64, f64> = (0..10).map(|i| (i, 0.0)).collect();
        let (kept, pruned) = consensus_filter(&scores, 0.0);
        assert_eq!(kept.len(), 10);
        assert!(pruned.is_empty());

        scores.insert(6, 0.9);
        let (kept, pruned) = consensus_filter(&scores, 0.1);
        assert_eq!(pruned, BTreeSet::from([6]));
        assert_eq!(kept.len(), 9);

        // all tied: lowest ids go first
        let tied: BTreeMap<u64, f64> = (0..10).map(|i| (i, 0.3)).collect();
        let (_, pruned) = consensus_filter(&tied, 0.2);
        assert_eq!(pruned, BTreeSet::from([0, 1]));
    }

    #[test]
    fn targeting_examples() {
        let pol = policy_with(&[
            (0, 10, 1.0, [0.0; 3], [0.0; 3]),
            (1, 10, 1.0, [0.0; 3], [0.0; 3]),
            (2, 10, 1.0, [0.0; 3], [0.0; 3]),
        ]);
        assert_eq!(
            targeting(&pol, &BTreeMap::from([(2, 4)]), 0.0, 1e-8).unwrap(),
            BTreeSet::from([2])
        );
        // T = {10, 6, 2} up to a common factor
        let counts = BTreeMap::from([(0, 10), (1, 6), (2, 2)]);
        assert_eq!(
            targeting(&pol, &counts, 0.5, 1e-8).unwrap(),
            BTreeSet::from([0, 1])
        );
        assert_eq!(targeting(&pol, &counts, 1.0, 1e-8).unwrap().len(), 3);
        assert!(matches!(
            targeting(&pol, &BTreeMap::from([(9, 1)]), 0.5, 1e-8),
            Err(ScopeError::UnknownClass { class: 9 })
        ));
    }

    #[test]
    fn rare_classes_escape_targeting() {
        // equal local counts, but class 1 is globally rare
        let pol = policy_with(&[
            (0, 90, 0.2, [0.0; 3], [0.0; 3]),
            (1, 10, 1.8, [0.0; 3], [0.0; 3]),
        ]);
        let counts = BTreeMap::from([(0, 50), (1, 50)]);
        assert_eq!(
            targeting(&pol, &counts, 0.5, 1e-8).unwrap(),
            BTreeSet::from([0])
        );
    }

    #[test]
    fn balance_examples() {
        let candidates: BTreeMap<u64, (u32, f64)> =
            (0..10).map(|i| (i, (0, i as f64 / 10.0))).collect();
        assert!(balance_filter(&candidates, &BTreeSet::new(), 0.5).is_empty());
        assert_eq!(
            balance_filter(&candidates, &BTreeSet::from([0]), 0.5),
            BTreeSet::from([5, 6, 7, 8, 9])
        );

        let mut mixed = candidates.clone();
        mixed.extend((10..14).map(|i| (i, (1, 5.0))));
        let pruned = balance_filter(&mixed, &BTreeSet::from([0]), 0.5);
        assert!(pruned.iter().all(|&id| id < 10));
    }

    #[test]
    fn identity_pipeline() {
        let pol = policy_with(&[
            (0, 5, 0.8, [0.7, 0.5, 0.2], [0.01, 0.01, 0.01]),
            (1, 3, 1.2, [0.7, 0.5, 0.2], [0.01, 0.01, 0.01]),
        ]);
        let labels: BTreeMap<u64, u32> = (0..8).map(|i| (i, (i % 2) as u32)).collect();
        let scores: BTreeMap<u64, ScoreTriple> = (0..8)
            .map(|i| {
                let rs = 0.5 + 0.05 * i as f64;
                (
                    i,
                    ScoreTriple {
                        rs,
                        ds: (1.0 - rs * rs).sqrt(),
                        s_neg: 0.3 - 0.02 * i as f64,
                    },
                )
            })
            .collect();
        let cfg = SelectConfig {
            p_l: 0.0,
            p_f: 0.0,
            beta: 0.5,
        };
        let d = select_coreset(4, &labels, &scores, &pol, &cfg).unwrap();
        assert_eq!(d.client_id, 4);
        assert_eq!(d.kept.len(), 8);
        assert!(d.pruned_noise.is_empty() && d.pruned_redundant.is_empty());
    }

    #[test]
    fn missing_policy_class_is_an_error() {
        let pol = policy_with(&[(0, 5, 1.0, [0.5; 3], [0.01; 3])]);
        let labels = BTreeMap::from([(1, 0), (2, 3)]);
        let s = ScoreTriple {
            rs: 0.5,
            ds: 0.5,
            s_neg: 0.5,
        };
        let scores = BTreeMap::from([(1, s), (2, s)]);
        let err = select_coreset(0, &labels, &scores, &pol, &SelectConfig::default()).unwrap_err();
        assert!(matches!(err, ScopeError::Sample { sample_id: 2, .. }));
        assert!(select_coreset(
            0,
            &labels,
            &scores,
            &pol,
            &SelectConfig {
                p_l: 1.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn disposition_export() {
        let d = CoresetDecision {
            client_id: 0,
            kept: BTreeSet::from([1, 4]),
            pruned_noise: BTreeSet::from([3]),
            pruned_redundant: BTreeSet::from([2]),
            anomaly_scores: BTreeMap::new(),
            redundancy_scores: BTreeMap::new(),
            target_classes: BTreeSet::new(),
        };
        let mut buf = Vec::new();
        d.write_dispositions(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "1,kept\n2,redundant\n3,noise\n4,kept\n"
        );
        let labels = BTreeMap::from([(1, 0), (2, 0), (3, 1), (4, 1)]);
        let s = d.class_summary(&labels);
        assert_eq!(
            s[&0],
            DispositionCounts {
                kept: 1,
                noise: 0,
                redundant: 1
            }
        );
        assert_eq!(
            s[&1],
            DispositionCounts {
                kept: 1,
                noise: 1,
                redundant: 0
            }
        );
    }
}
