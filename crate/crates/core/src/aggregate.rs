//! Server-side reduction of client profiles into the broadcast policy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};
use crate::profile::UplinkMessage;
use crate::wire::{put_header, ByteReader};

pub const DOWNLINK_MAGIC: &[u8; 4] = b"SCDN";
/// magic + version + gamma + epsilon + class count.
pub const DOWNLINK_HEADER_BYTES: usize = 4 + 2 + 8 + 8 + 4;
/// class_id + N_c + W_c + six f64 moments.
pub const DOWNLINK_CLASS_BYTES: usize = 4 + 8 + 8 + 6 * 8;

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Globally pooled moments of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: [f64; 3],
    pub variance: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPolicy {
    pub count: u64,
    pub frequency: f64,
    pub weight: f64,
    pub mean: [f64; 3],
    pub variance: [f64; 3],
}

/// What the server broadcasts: per-class rarity and pooled score moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPolicy {
    pub gamma: f64,
    pub epsilon: f64,
    pub classes: BTreeMap<u32, ClassPolicy>,
}

fn sorted_uplinks(uplinks: &[UplinkMessage]) -> Result<Vec<&UplinkMessage>> {
    let mut sorted: Vec<&UplinkMessage> = uplinks.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(ScopeError::KeyMismatch(format!(
                "two uplinks from client {}",
                pair[0].client_id
            )));
        }
    }
    Ok(sorted)
}

/// Global per-class sample counts over `0..num_classes`; absent classes map to 0.
pub fn aggregate_counts(uplinks: &[UplinkMessage], num_classes: u32) -> Result<BTreeMap<u32, u64>> {
    let mut counts: BTreeMap<u32, u64> = (0..num_classes).map(|c| (c, 0)).collect();
    for u in sorted_uplinks(uplinks)? {
        for p in &u.profiles {
            *counts
                .get_mut(&p.class_id)
                .ok_or(ScopeError::UnknownClass { class: p.class_id })? += p.count;
        }
    }
    Ok(counts)
}

/// Inverse-frequency power-law weights, rescaled to mean 1 over present classes.
///
/// Classes with zero count get the raw weight of frequency zero, `(1/ε)^γ`
/// (or the largest present raw weight when `ε = 0`), before rescaling.
pub fn rarity_weights(
    counts: &BTreeMap<u32, u64>,
    gamma: f64,
    epsilon: f64,
) -> Result<BTreeMap<u32, f64>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(ScopeError::Config(format!(
            "aggregate: gamma must be finite and >= 0, got {gamma}"
        )));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(ScopeError::Config(format!(
            "aggregate: epsilon must be finite and >= 0, got {epsilon}"
        )));
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(ScopeError::EmptyFederation);
    }
    let raw = |n: u64| (1.0 / (n as f64 / total as f64 + epsilon)).powf(gamma);

    let present: Vec<(u32, f64)> = counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&c, &n)| (c, raw(n)))
        .collect();
    let mean = present.iter().map(|(_, w)| w).sum::<f64>() / present.len() as f64;
    let absent_raw = if epsilon > 0.0 {
        raw(0)
    } else {
        present.iter().map(|(_, w)| *w).fold(f64::MIN, f64::max)
    };

    Ok(counts
        .iter()
        .map(|(&c, &n)| {
            let w = if n > 0 { raw(n) } else { absent_raw };
            (c, w / mean)
        })
        .collect())
}

/// Sample-weighted global means and law-of-total-variance pooled variances.
pub fn pool_statistics(uplinks: &[UplinkMessage]) -> Result<BTreeMap<u32, ClassStats>> {
    let sorted = sorted_uplinks(uplinks)?;

    let mut totals: BTreeMap<u32, (u64, [f64; 3])> = BTreeMap::new();
    for u in &sorted {
        for p in &u.profiles {
            let e = totals.entry(p.class_id).or_insert((0, [0.0; 3]));
            e.0 += p.count;
            for m in 0..3 {
                e.1[m] += p.count as f64 * p.mean[m];
            }
        }
    }

    let mut out: BTreeMap<u32, ClassStats> = totals
        .iter()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(&c, (n, sums))| {
            let mean = sums.map(|s| s / *n as f64);
            (
                c,
                ClassStats {
                    mean,
                    variance: [0.0; 3],
                },
            )
        })
        .collect();

    for u in &sorted {
        for p in u.profiles.iter().filter(|p| p.count > 0) {
            let stats = out.get_mut(&p.class_id).expect("class seen in first pass");
            for m in 0..3 {
                let d = p.mean[m] - stats.mean[m];
                stats.variance[m] += p.count as f64 * (p.variance[m] + d * d);
            }
        }
    }
    for (c, stats) in out.iter_mut() {
        let n = totals[c].0 as f64;
        stats.variance = stats.variance.map(|v| (v / n).max(0.0));
    }
    Ok(out)
}

/// Assembles the policy.
///
/// `counts` and `weights` must share a key set; `stats` must cover exactly the
/// classes with a non-zero count. Zero-count classes carry zero moments.
pub fn broadcast_policy(
    counts: &BTreeMap<u32, u64>,
    weights: &BTreeMap<u32, f64>,
    stats: &BTreeMap<u32, ClassStats>,
    gamma: f64,
    epsilon: f64,
) -> Result<GlobalPolicy> {
    let count_keys: BTreeSet<u32> = counts.keys().copied().collect();
    let weight_keys: BTreeSet<u32> = weights.keys().copied().collect();
    if count_keys != weight_keys {
        return Err(ScopeError::KeyMismatch(format!(
            "counts cover {count_keys:?} but weights cover {weight_keys:?}"
        )));
    }
    let present: BTreeSet<u32> = counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&c, _)| c)
        .collect();
    let stat_keys: BTreeSet<u32> = stats.keys().copied().collect();
    if present != stat_keys {
        return Err(ScopeError::KeyMismatch(format!(
            "classes with data {present:?} but statistics for {stat_keys:?}"
        )));
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(ScopeError::EmptyFederation);
    }

    let classes = counts
        .iter()
        .map(|(&c, &n)| {
            let s = stats.get(&c).copied().unwrap_or(ClassStats {
                mean: [0.0; 3],
                variance: [0.0; 3],
            });
            (
                c,
                ClassPolicy {
                    count: n,
                    frequency: n as f64 / total as f64,
                    weight: weights[&c],
                    mean: s.mean,
                    variance: s.variance,
                },
            )
        })
        .collect();
    Ok(GlobalPolicy {
        gamma,
        epsilon,
        classes,
    })
}

impl GlobalPolicy {
    /// Runs the whole server phase on a set of uplinks.
    pub fn from_uplinks(
        uplinks: &[UplinkMessage],
        num_classes: u32,
        gamma: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let counts = aggregate_counts(uplinks, num_classes)?;
        let weights = rarity_weights(&counts, gamma, epsilon)?;
        let stats = pool_statistics(uplinks)?;
        broadcast_policy(&counts, &weights, &stats, gamma, epsilon)
    }

    pub fn class(&self, class: u32) -> Result<&ClassPolicy> {
        self.classes
            .get(&class)
            .ok_or(ScopeError::UnknownClass { class })
    }

    pub fn payload_bytes(&self) -> usize {
        DOWNLINK_HEADER_BYTES + self.classes.len() * DOWNLINK_CLASS_BYTES
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        put_header(&mut out, DOWNLINK_MAGIC);
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for (c, p) in &self.classes {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&p.count.to_le_bytes());
            out.extend_from_slice(&p.weight.to_le_bytes());
            for x in p.mean.iter().chain(&p.variance) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Frequencies are not transmitted; they are recomputed from the counts.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "downlink");
        r.header(DOWNLINK_MAGIC)?;
        let gamma = r.f64()?;
        let epsilon = r.f64()?;
        let n = r.u32()? as usize;
        if r.remaining() != n * DOWNLINK_CLASS_BYTES {
            return Err(ScopeError::Truncated(format!(
                "downlink declares {n} classes but carries {} payload bytes",
                r.remaining()
            )));
        }
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let class = r.u32()?;
            let count = r.u64()?;
            let weight = r.f64()?;
            let mut vals = [0.0; 6];
            for v in &mut vals {
                *v = r.f64()?;
            }
            rows.push((class, count, weight, vals));
        }
        r.finish()?;

        let total: u64 = rows.iter().map(|r| r.1).sum();
        let mut classes = BTreeMap::new();
        for (class, count, weight, vals) in rows {
            let frequency = if total > 0 {
                count as f64 / total as f64
            } else {
                0.0
            };
            let policy = ClassPolicy {
                count,
                frequency,
                weight,
                mean: [vals[0], vals[1], vals[2]],
                variance: [vals[3], vals[4], vals[5]],
            };
            if classes.insert(class, policy).is_some() {
                return Err(ScopeError::Malformed(format!(
                    "downlink lists class {class} twice"
                )));
            }
        }
        Ok(GlobalPolicy {
            gamma,
            epsilon,
            classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{serialize_uplink, LocalClassProfile};

    fn profile(client: u32, class: u32, count: u64, mean: f64, var: f64) -> LocalClassProfile {
        LocalClassProfile {
            client_id: client,
            class_id: class,
            count,
            mean: [mean; 3],
            variance: [var; 3],
        }
    }

    fn uplink(client: u32, profiles: Vec<LocalClassProfile>) -> UplinkMessage {
        serialize_uplink(client, profiles).unwrap()
    }

    #[test]
    fn count_examples() {
        let one = [uplink(0, vec![profile(0, 0, 5, 0.5, 0.0)])];
        assert_eq!(aggregate_counts(&one, 1).unwrap(), BTreeMap::from([(0, 5)]));

        let two = [
            uplink(0, vec![profile(0, 0, 3, 0.5, 0.0)]),
            uplink(
                1,
                vec![profile(1, 0, 4, 0.5, 0.0), profile(1, 1, 2, 0.5, 0.0)],
            ),
        ];
        assert_eq!(
            aggregate_counts(&two, 3).unwrap(),
            BTreeMap::from([(0, 7), (1, 2), (2, 0)])
        );
        assert!(matches!(
            aggregate_counts(&two, 1),
            Err(ScopeError::UnknownClass { class: 1 })
        ));
        let dup = [uplink(0, vec![]), uplink(0, vec![])];
        assert!(aggregate_counts(&dup, 1).is_err());
    }

    #[test]
    fn rarity_examples() {
        let w = rarity_weights(&BTreeMap::from([(0, 50), (1, 50)]), 1.0, 0.0).unwrap();
        assert_eq!(w, BTreeMap::from([(0, 1.0), (1, 1.0)]));

        let w = rarity_weights(&BTreeMap::from([(0, 75), (1, 25)]), 1.0, 0.0).unwrap();
        assert!((w[&0] - 0.5).abs() < 1e-12);
        assert!((w[&1] - 1.5).abs() < 1e-12);

        let w = rarity_weights(&BTreeMap::from([(0, 90), (1, 7), (2, 3)]), 0.0, 1e-8).unwrap();
        assert!(w.values().all(|&x| x == 1.0));

        assert!(matches!(
            rarity_weights(&BTreeMap::from([(0, 0)]), 1.0, 0.0),
            Err(ScopeError::EmptyFederation)
        ));
        assert!(rarity_weights(&BTreeMap::from([(0, 1)]), -1.0, 0.0).is_err());
    }

    #[test]
    fn zero_count_classes_get_the_largest_weight() {
        let counts = BTreeMap::from([(0, 80), (1, 20), (2, 0)]);
        let w = rarity_weights(&counts, 1.0, 1e-8).unwrap();
        assert!(w[&2] > w[&1] && w[&1] > w[&0]);
        let mean_present = (w[&0] + w[&1]) / 2.0;
        assert!((mean_present - 1.0).abs() < 1e-12);

        let w = rarity_weights(&counts, 1.0, 0.0).unwrap();
        assert!(w[&2].is_finite());
        assert_eq!(w[&2], w[&1]);
    }

    #[test]
    fn pooled_two_clients() {
        let ups = [
            uplink(1, vec![profile(1, 0, 2, 0.8, 0.04)]),
            uplink(0, vec![profile(0, 0, 2, 0.4, 0.04)]),
        ];
        let s = pool_statistics(&ups).unwrap();
        assert!((s[&0].mean[0] - 0.6).abs() < 1e-15);
        assert!((s[&0].variance[0] - 0.08).abs() < 1e-15);

        let raw = [0.2, 0.6, 0.6, 1.0];
        let m = raw.iter().sum::<f64>() / 4.0;
        let v = raw.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!((s[&0].variance[0] - v).abs() < 1e-15);
    }

    #[test]
    fn single_client_passes_through() {
        let p = LocalClassProfile {
            client_id: 0,
            class_id: 2,
            count: 7,
            mean: [0.7, 0.3, 0.2],
            variance: [0.01, 0.02, 0.005],
        };
        let s = pool_statistics(&[uplink(0, vec![p.clone()])]).unwrap();
        assert_eq!(s[&2].mean, p.mean);
        assert_eq!(s[&2].variance, p.variance);
    }

    #[test]
    fn policy_invariants_and_round_trip() {
        let ups = [
            uplink(
                0,
                vec![profile(0, 0, 30, 0.7, 0.01), profile(0, 1, 5, 0.6, 0.02)],
            ),
            uplink(1, vec![profile(1, 0, 10, 0.8, 0.01)]),
        ];
        let policy = GlobalPolicy::from_uplinks(&ups, 3, 1.0, 1e-8).unwrap();
        let fsum: f64 = policy.classes.values().map(|c| c.frequency).sum();
        assert!((fsum - 1.0).abs() < 1e-12);
        assert_eq!(policy.classes[&0].count, 40);
        assert_eq!(policy.classes[&2].count, 0);
        assert!(policy.classes[&0].weight < policy.classes[&1].weight);
        assert!(policy
            .classes
            .values()
            .all(|c| c.variance.iter().all(|&v| v >= 0.0)));

        let bytes = policy.encode();
        assert_eq!(bytes.len(), policy.payload_bytes());
        assert_eq!(GlobalPolicy::decode(&bytes).unwrap(), policy);
        assert!(GlobalPolicy::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn broadcast_rejects_mismatched_keys() {
        let counts = BTreeMap::from([(0, 3), (1, 0)]);
        let weights = BTreeMap::from([(0, 1.0)]);
        assert!(matches!(
            broadcast_policy(&counts, &weights, &BTreeMap::new(), 1.0, 0.0),
            Err(ScopeError::KeyMismatch(_))
        ));
        let weights = BTreeMap::from([(0, 1.0), (1, 2.0)]);
        assert!(matches!(
            broadcast_policy(&counts, &weights, &BTreeMap::new(), 1.0, 0.0),
            Err(ScopeError::KeyMismatch(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_decrease_with_frequency(counts in prop::collection::vec(1u64..1000, 2..8),
                                               gamma in 0.1f64..3.0) {
                let map: BTreeMap<u32, u64> = counts.iter().enumerate().map(|(i, &n)| (i as u32, n)).collect();
                let w = rarity_weights(&map, gamma, 1e-8).unwrap();
                for (a, na) in &map {
                    for (b, nb) in &map {
                        if na < nb {
                            prop_assert!(w[a] > w[b]);
                        }
                    }
                }
                let mean = w.values().sum::<f64>() / w.len() as f64;
                prop_assert!((mean - 1.0).abs() < 1e-12);
            }

            #[test]
            fn raising_a_count_shifts_weight_to_others(
                counts in prop::collection::vec(1u64..1000, 2..8),
                pick in any::<prop::sample::Index>(),
                bump in 1u64..500,
                gamma in 0.1f64..3.0,
            ) {
                let before: BTreeMap<u32, u64> = counts.iter().enumerate().map(|(i, &n)| (i as u32, n)).collect();
                let target = pick.index(counts.len()) as u32;
                let mut after = before.clone();
                *after.get_mut(&target).unwrap() += bump;
                let w0 = rarity_weights(&before, gamma, 0.0).unwrap();
                let w1 = rarity_weights(&after, gamma, 0.0).unwrap();
                for c in before.keys() {
                    if *c == target {
                        prop_assert!(w1[c] <= w0[c] * (1.0 + 1e-12));
                    } else {
                        prop_assert!(w1[c] >= w0[c] * (1.0 - 1e-12));
                    }
                }
            }

            #[test]
            fn uplink_order_does_not_matter(seed in any::<u64>(), n in 1usize..6) {
                let ups: Vec<UplinkMessage> = (0..n as u32)
                    .map(|k| {
                        let x = ((seed >> (k * 7)) & 0x7f) as f64 / 128.0;
                        uplink(k, vec![profile(k, k % 2, 1 + k as u64, x, x * 0.1)])
                    })
                    .collect();
                let mut rev = ups.clone();
                rev.reverse();
                prop_assert_eq!(pool_statistics(&ups).unwrap(), pool_statistics(&rev).unwrap());
                prop_assert_eq!(aggregate_counts(&ups, 2).unwrap(), aggregate_counts(&rev, 2).unwrap());
            }
        }
    }
}
