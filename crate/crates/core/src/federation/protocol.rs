//! One-shot execution of the three-phase selection protocol.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::aggregate::{GlobalPolicy, DEFAULT_EPSILON, DEFAULT_GAMMA};
use crate::error::{Result, ScopeError};
use crate::geometry::Vocabulary;
use crate::profile::{build_profiles, serialize_uplink, UplinkMessage};
use crate::scoring::{score_client, EmbeddingRecord, ScoreTriple, UNASSIGNED_CLIENT};
use crate::select::{select_coreset, CoresetDecision, DispositionCounts, SelectConfig};

/// Everything the protocol itself needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeConfig {
    pub select: SelectConfig,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for ScopeConfig {
    fn default() -> Self {
        ScopeConfig {
            select: SelectConfig::default(),
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// How many scalars per (client, class) and how wide each one is, for the
/// communication estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingConfig {
    pub scalars_per_class: u64,
    pub bytes_per_scalar: u64,
}

impl Default for AccountingConfig {
    fn default() -> Self {
        AccountingConfig {
            scalars_per_class: 7,
            bytes_per_scalar: 4,
        }
    }
}

/// Uplink volume of scalar profiles versus shipping D-dimensional class
/// centroids for the same (client, class) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByteAccounting {
    pub baseline_bytes: u64,
    pub scope_bytes: u64,
    pub ratio: f64,
}

impl ByteAccounting {
    pub fn for_pairs(client_class_pairs: u64, dim: u64, acct: &AccountingConfig) -> Self {
        let baseline_bytes = client_class_pairs * dim * acct.bytes_per_scalar;
        let scope_bytes = client_class_pairs * acct.scalars_per_class * acct.bytes_per_scalar;
        ByteAccounting {
            baseline_bytes,
            scope_bytes,
            ratio: if scope_bytes > 0 {
                baseline_bytes as f64 / scope_bytes as f64
            } else {
                0.0
            },
        }
    }
}

/// Closed-form estimate for `K` clients that each hold all `C` classes.
pub fn table_accounting(k: u64, c: u64, dim: u64, acct: &AccountingConfig) -> ByteAccounting {
    ByteAccounting::for_pairs(k * c, dim, acct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub samples: usize,
    pub local_classes: usize,
    pub uplink_bytes: usize,
    pub target_classes: BTreeSet<u32>,
    pub dispositions: BTreeMap<u32, DispositionCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub clients: Vec<ClientReport>,
    /// Sum of the serialized uplink sizes.
    pub total_uplink_bytes: usize,
    /// Serialized policy size, counted once per receiving client.
    pub downlink_bytes: usize,
    pub total_downlink_bytes: usize,
    pub accounting: ByteAccounting,
    pub policy: GlobalPolicy,
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub report: RoundReport,
    pub decisions: BTreeMap<u32, CoresetDecision>,
    pub scores: BTreeMap<u64, ScoreTriple>,
    pub uplinks: Vec<UplinkMessage>,
}

/// Groups records by client, rejecting unassigned records and duplicate ids.
pub fn group_by_client(records: &[EmbeddingRecord]) -> Result<BTreeMap<u32, Vec<EmbeddingRecord>>> {
    let mut seen = BTreeSet::new();
    let mut out: BTreeMap<u32, Vec<EmbeddingRecord>> = BTreeMap::new();
    for (index, r) in records.iter().enumerate() {
        if r.client_id == UNASSIGNED_CLIENT {
            return Err(ScopeError::Malformed(format!(
                "record {index} (sample {}) is not assigned to a client",
                r.sample_id
            )));
        }
        if !seen.insert(r.sample_id) {
            return Err(ScopeError::DuplicateId {
                index,
                sample_id: r.sample_id,
            });
        }
        out.entry(r.client_id).or_default().push(r.clone());
    }
    Ok(out)
}

/// Client phase one: scores plus the uplink message.
pub fn client_phase_one(
    client_id: u32,
    records: &[EmbeddingRecord],
    prototypes: &Vocabulary,
) -> Result<(BTreeMap<u64, ScoreTriple>, UplinkMessage)> {
    let scores = score_client(records, prototypes)?;
    let labels = labels_of(records);
    let profiles = build_profiles(client_id, &scores, &labels)?;
    Ok((scores, serialize_uplink(client_id, profiles)?))
}

pub(crate) fn labels_of(records: &[EmbeddingRecord]) -> BTreeMap<u64, u32> {
    records
        .iter()
        .map(|r| (r.sample_id, r.class_label))
        .collect()
}

/// Scores, aggregates and selects once. Clients run in parallel; the output
/// does not depend on the number of worker threads.
pub fn run_protocol(
    records: &[EmbeddingRecord],
    prototypes: &Vocabulary,
    config: &ScopeConfig,
    accounting: &AccountingConfig,
) -> Result<ProtocolRun> {
    config.select.validate()?;
    let clients = group_by_client(records)?;
    for (index, r) in records.iter().enumerate() {
        if r.embedding.dim() != prototypes.dim() {
            return Err(ScopeError::for_record(
                index,
                ScopeError::DimensionMismatch {
                    expected: prototypes.dim(),
                    found: r.embedding.dim(),
                },
            ));
        }
    }

    let phase_one: Vec<(u32, BTreeMap<u64, ScoreTriple>, UplinkMessage)> = clients
        .par_iter()
        .map(|(&k, recs)| client_phase_one(k, recs, prototypes).map(|(s, u)| (k, s, u)))
        .collect::<Result<_>>()?;

    let uplinks: Vec<UplinkMessage> = phase_one.iter().map(|(_, _, u)| u.clone()).collect();
    let policy = GlobalPolicy::from_uplinks(
        &uplinks,
        prototypes.len() as u32,
        config.gamma,
        config.epsilon,
    )?;

    let decisions: Vec<CoresetDecision> = phase_one
        .par_iter()
        .map(|(k, scores, _)| {
            let labels = labels_of(&clients[k]);
            select_coreset(*k, &labels, scores, &policy, &config.select)
        })
        .collect::<Result<_>>()?;

    let mut client_reports = Vec::with_capacity(decisions.len());
    for ((k, _, uplink), decision) in phase_one.iter().zip(&decisions) {
        let labels = labels_of(&clients[k]);
        client_reports.push(ClientReport {
            client_id: *k,
            samples: labels.len(),
            local_classes: uplink.profiles.len(),
            uplink_bytes: uplink.payload_bytes,
            target_classes: decision.target_classes.clone(),
            dispositions: decision.class_summary(&labels),
        });
    }

    let pairs: u64 = uplinks.iter().map(|u| u.profiles.len() as u64).sum();
    let downlink_bytes = policy.payload_bytes();
    let report = RoundReport {
        total_uplink_bytes: uplinks.iter().map(|u| u.payload_bytes).sum(),
        downlink_bytes,
        total_downlink_bytes: downlink_bytes * uplinks.len(),
        accounting: ByteAccounting::for_pairs(pairs, prototypes.dim() as u64, accounting),
        clients: client_reports,
        policy,
    };

    let scores = phase_one
        .into_iter()
        .flat_map(|(_, s, _)| s.into_iter())
        .collect();
    Ok(ProtocolRun {
        report,
        decisions: decisions.into_iter().map(|d| (d.client_id, d)).collect(),
        scores,
        uplinks,
    })
}

/// Random pruning baseline: on every client, keep a uniformly random subset
/// of the same size as the selected coreset.
pub fn random_subsets(
    records: &[EmbeddingRecord],
    decisions: &BTreeMap<u32, CoresetDecision>,
    seed: u64,
) -> Result<BTreeMap<u32, BTreeSet<u64>>> {
    let clients = group_by_client(records)?;
    let mut out = BTreeMap::new();
    for (k, recs) in clients {
        let keep = decisions
            .get(&k)
            .map(|d| d.kept.len())
            .unwrap_or(recs.len());
        let mut ids: Vec<u64> = recs.iter().map(|r| r.sample_id).collect();
        ids.shuffle(&mut rng_for(seed, 0x524e_4400_0000 | k as u64));
        out.insert(k, ids.into_iter().take(keep).collect());
    }
    Ok(out)
}
