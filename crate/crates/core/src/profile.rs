//! Client-side per-class score statistics, the only thing a client uploads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};
use crate::scoring::ScoreTriple;
use crate::wire::{put_header, ByteReader};

pub const UPLINK_MAGIC: &[u8; 4] = b"SCUP";
/// magic + version + client_id + profile count.
pub const UPLINK_HEADER_BYTES: usize = 4 + 2 + 4 + 4;
/// class_id + count + six f64 moments.
pub const UPLINK_PROFILE_BYTES: usize = 4 + 8 + 6 * 8;

/// Count and population moments of the three metrics for one class on one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalClassProfile {
    pub client_id: u32,
    pub class_id: u32,
    pub count: u64,
    /// RS, DS, S_neg.
    pub mean: [f64; 3],
    /// Population variances, same order as `mean`.
    pub variance: [f64; 3],
}

/// Groups scores by class and computes exact population moments.
///
/// Sums run in ascending sample id order. Absent classes emit nothing.
pub fn build_profiles(
    client_id: u32,
    scores: &BTreeMap<u64, ScoreTriple>,
    labels: &BTreeMap<u64, u32>,
) -> Result<Vec<LocalClassProfile>> {
    let mut by_class: BTreeMap<u32, Vec<[f64; 3]>> = BTreeMap::new();
    for (id, s) in scores {
        let class = labels
            .get(id)
            .ok_or_else(|| ScopeError::KeyMismatch(format!("scored sample {id} has no label")))?;
        by_class.entry(*class).or_default().push(s.as_array());
    }

    Ok(by_class
        .into_iter()
        .map(|(class_id, rows)| {
            let (mean, variance) = population_moments(&rows);
            LocalClassProfile {
                client_id,
                class_id,
                count: rows.len() as u64,
                mean,
                variance,
            }
        })
        .collect())
}

/// Two-pass population mean and variance per metric. `rows` must be non-empty.
pub(crate) fn population_moments(rows: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = rows.len() as f64;
    let mut mean = [0.0; 3];
    for r in rows {
        for m in 0..3 {
            mean[m] += r[m];
        }
    }
    mean.iter_mut().for_each(|x| *x /= n);

    let mut var = [0.0; 3];
    for r in rows {
        for m in 0..3 {
            let d = r[m] - mean[m];
            var[m] += d * d;
        }
    }
    var.iter_mut().for_each(|x| *x /= n);
    (mean, var)
}

/// Serialized uplink for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UplinkMessage {
    pub client_id: u32,
    pub profiles: Vec<LocalClassProfile>,
    pub payload_bytes: usize,
}

impl UplinkMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes);
        put_header(&mut out, UPLINK_MAGIC);
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.profiles.len() as u32).to_le_bytes());
        for p in &self.profiles {
            out.extend_from_slice(&p.class_id.to_le_bytes());
            out.extend_from_slice(&p.count.to_le_bytes());
            for x in p.mean.iter().chain(&p.variance) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "uplink");
        r.header(UPLINK_MAGIC)?;
        let client_id = r.u32()?;
        let n = r.u32()? as usize;
        if r.remaining() != n * UPLINK_PROFILE_BYTES {
            return Err(ScopeError::Truncated(format!(
                "uplink declares {n} profiles but carries {} payload bytes",
                r.remaining()
            )));
        }
        let mut profiles = Vec::with_capacity(n);
        for _ in 0..n {
            let class_id = r.u32()?;
            let count = r.u64()?;
            let mut vals = [0.0; 6];
            for v in &mut vals {
                *v = r.f64()?;
            }
            profiles.push(LocalClassProfile {
                client_id,
                class_id,
                count,
                mean: [vals[0], vals[1], vals[2]],
                variance: [vals[3], vals[4], vals[5]],
            });
        }
        r.finish()?;
        Ok(UplinkMessage {
            client_id,
            profiles,
            payload_bytes: bytes.len(),
        })
    }
}

/// Wraps one client's profiles into an uplink with its exact wire size.
pub fn serialize_uplink(client_id: u32, profiles: Vec<LocalClassProfile>) -> Result<UplinkMessage> {
    if let Some(p) = profiles.iter().find(|p| p.client_id != client_id) {
        return Err(ScopeError::KeyMismatch(format!(
            "profile of client {} in uplink of client {client_id}",
            p.client_id
        )));
    }
    let payload_bytes = UPLINK_HEADER_BYTES + profiles.len() * UPLINK_PROFILE_BYTES;
    Ok(UplinkMessage {
        client_id,
        profiles,
        payload_bytes,
    })
}
