//! Per-sample semantic metrics against the global prototype vocabulary.
//!
//! * representation score (RS): cosine with the own-class prototype;
//! * diversity score (DS): norm of the embedding's rejection from that
//!   prototype;
//! * boundary proximity (S_neg): best cosine over every other class.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};
use crate::geometry::{cosine, l2_norm, EmbeddingVector, Vocabulary};

/// Client id used for records that have not been partitioned yet.
pub const UNASSIGNED_CLIENT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: u64,
    pub client_id: u32,
    pub class_label: u32,
    pub embedding: EmbeddingVector,
}

/// The three metrics of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub rs: f64,
    pub ds: f64,
    pub s_neg: f64,
}

impl ScoreTriple {
    /// Metric values in the canonical order RS, DS, S_neg.
    pub fn as_array(&self) -> [f64; 3] {
        [self.rs, self.ds, self.s_neg]
    }
}

pub fn representation_score(sample: &EmbeddingRecord, prototypes: &Vocabulary) -> Result<f64> {
    cosine(&sample.embedding, prototypes.get(sample.class_label)?)
}

/// Norm of `v - RS * t`, computed from the explicit rejection vector.
pub fn diversity_score(sample: &EmbeddingRecord, prototypes: &Vocabulary) -> Result<f64> {
    let proto = prototypes.get(sample.class_label)?;
    let rs = cosine(&sample.embedding, proto)?;
    Ok(rejection_norm(&sample.embedding, proto, rs))
}

fn rejection_norm(v: &EmbeddingVector, proto: &EmbeddingVector, rs: f64) -> f64 {
    let residual: Vec<f64> = v
        .as_slice()
        .iter()
        .zip(proto.as_slice())
        .map(|(x, t)| x - rs * t)
        .collect();
    l2_norm(&residual).min(1.0)
}

/// Maximum cosine over all prototypes except the sample's own class.
pub fn boundary_proximity(sample: &EmbeddingRecord, prototypes: &Vocabulary) -> Result<f64> {
    if prototypes.len() < 2 {
        return Err(ScopeError::VocabularyTooSmall {
            size: prototypes.len(),
        });
    }
    prototypes.get(sample.class_label)?;
    let mut best = f64::NEG_INFINITY;
    for p in prototypes
        .iter()
        .filter(|p| p.class_id != sample.class_label)
    {
        best = best.max(cosine(&sample.embedding, &p.vector)?);
    }
    Ok(best)
}

pub fn score_sample(sample: &EmbeddingRecord, prototypes: &Vocabulary) -> Result<ScoreTriple> {
    let proto = prototypes.get(sample.class_label)?;
    let rs = cosine(&sample.embedding, proto)?;
    Ok(ScoreTriple {
        rs,
        ds: rejection_norm(&sample.embedding, proto, rs),
        s_neg: boundary_proximity(sample, prototypes)?,
    })
}

/// Scores every record of one client.
pub fn score_client(
    records: &[EmbeddingRecord],
    prototypes: &Vocabulary,
) -> Result<BTreeMap<u64, ScoreTriple>> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.client_id != first.client_id) {
            return Err(ScopeError::KeyMismatch(format!(
                "score_client got records of clients {} and {}",
                first.client_id, other.client_id
            )));
        }
    }
    let scored: Vec<(u64, ScoreTriple)> = records
        .par_iter()
        .map(|r| {
            score_sample(r, prototypes)
                .map(|s| (r.sample_id, s))
                .map_err(|e| ScopeError::for_sample(r.sample_id, e))
        })
        .collect::<Result<_>>()?;

    let mut out = BTreeMap::new();
    for (id, s) in scored {
        if out.insert(id, s).is_some() {
            return Err(ScopeError::Malformed(format!("duplicate sample id {id}")));
        }
    }
    Ok(out)
}
