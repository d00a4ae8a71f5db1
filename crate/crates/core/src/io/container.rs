//! Binary embedding and prototype containers, plus CSV import.
//!
//! Embeddings (`SCEM`): magic, version u16, D u32, M u32, record count u64,
//! then per record id u64, client u32, label u32 and D x f32.
//! Prototypes (`SCPT`): magic, version u16, D u32, M u32, then per class
//! class_id u32 and D x f32. Everything is little-endian.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Result, ScopeError};
use crate::geometry::{build_prototype, l2_normalize, ClassPrototype, EmbeddingVector, Vocabulary};
use crate::scoring::{EmbeddingRecord, UNASSIGNED_CLIENT};
use crate::wire::{put_header, ByteReader};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SCEM";
pub const PROTOTYPE_MAGIC: &[u8; 4] = b"SCPT";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub num_classes: u32,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    /// Checks dimensions, labels and id uniqueness, reporting the first offender.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for (index, r) in self.records.iter().enumerate() {
            if r.embedding.dim() != self.dim {
                return Err(ScopeError::for_record(
                    index,
                    ScopeError::DimensionMismatch {
                        expected: self.dim,
                        found: r.embedding.dim(),
                    },
                ));
            }
            if r.class_label >= self.num_classes {
                return Err(ScopeError::LabelOutOfRange {
                    index,
                    label: r.class_label,
                    num_classes: self.num_classes,
                });
            }
            if !ids.insert(r.sample_id) {
                return Err(ScopeError::DuplicateId {
                    index,
                    sample_id: r.sample_id,
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(22 + self.records.len() * (16 + 4 * self.dim));
        put_header(&mut out, EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.sample_id.to_le_bytes());
            out.extend_from_slice(&r.client_id.to_le_bytes());
            out.extend_from_slice(&r.class_label.to_le_bytes());
            for &x in r.embedding.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "embedding file");
        r.header(EMBEDDING_MAGIC)?;
        let dim = r.u32()? as usize;
        let num_classes = r.u32()?;
        let count = r.u64()?;
        let record_bytes = 16 + 4 * dim as u64;
        if (r.remaining() as u64) != count.saturating_mul(record_bytes) {
            return Err(ScopeError::Truncated(format!(
                "embedding file declares {count} records of {record_bytes} bytes but carries {}",
                r.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for index in 0..count as usize {
            let sample_id = r.u64()?;
            let client_id = r.u32()?;
            let class_label = r.u32()?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(r.f32()? as f64);
            }
            let embedding = EmbeddingVector::from_stored(values)
                .map_err(|e| ScopeError::for_record(index, e))?;
            records.push(EmbeddingRecord {
                sample_id,
                client_id,
                class_label,
                embedding,
            });
        }
        r.finish()?;
        let file = EmbeddingFile {
            dim,
            num_classes,
            records,
        };
        file.validate()?;
        Ok(file)
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    EmbeddingFile::decode(&fs::read(path)?)
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    fs::write(path, file.encode()?)?;
    Ok(())
}

pub fn encode_prototypes(vocab: &Vocabulary) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, PROTOTYPE_MAGIC);
    out.extend_from_slice(&(vocab.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
    for p in vocab.iter() {
        out.extend_from_slice(&p.class_id.to_le_bytes());
        for &x in p.vector.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_prototypes(bytes: &[u8]) -> Result<Vocabulary> {
    let mut r = ByteReader::new(bytes, "prototype file");
    r.header(PROTOTYPE_MAGIC)?;
    let dim = r.u32()? as usize;
    let m = r.u32()? as usize;
    if r.remaining() != m * (4 + 4 * dim) {
        return Err(ScopeError::Truncated(format!(
            "prototype file declares {m} classes of dimension {dim} but carries {} bytes",
            r.remaining()
        )));
    }
    let mut prototypes = Vec::with_capacity(m);
    for index in 0..m {
        let class_id = r.u32()?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(r.f32()? as f64);
        }
        let vector =
            EmbeddingVector::from_stored(values).map_err(|e| ScopeError::for_record(index, e))?;
        prototypes.push(ClassPrototype { class_id, vector });
    }
    r.finish()?;
    Vocabulary::new(prototypes)
}

pub fn read_prototypes(path: &Path) -> Result<Vocabulary> {
    decode_prototypes(&fs::read(path)?)
}

pub fn write_prototypes(path: &Path, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, encode_prototypes(vocab))?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| ScopeError::Malformed(format!("csv row {line}: bad {what} {field:?}")))
}

/// Imports `sample_id,client_id,label,v0,...` rows (with a header row).
/// An empty `client_id` marks the record as unassigned. Vectors are normalized.
pub fn import_embeddings_csv(path: &Path, num_classes: Option<u32>) -> Result<EmbeddingFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let mut records = Vec::new();
    let mut dim = None;
    for (index, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() < 5 {
            return Err(ScopeError::Malformed(format!(
                "csv row {index}: need id, client, label and at least two coordinates"
            )));
        }
        let sample_id = parse_field(&row[0], "sample_id", index)?;
        let client_id = if row[1].trim().is_empty() {
            UNASSIGNED_CLIENT
        } else {
            parse_field(&row[1], "client_id", index)?
        };
        let class_label = parse_field(&row[2], "label", index)?;
        let values: Vec<f64> = row
            .iter()
            .skip(3)
            .map(|f| parse_field(f, "coordinate", index))
            .collect::<Result<_>>()?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected {
            return Err(ScopeError::for_record(
                index,
                ScopeError::DimensionMismatch {
                    expected,
                    found: values.len(),
                },
            ));
        }
        records.push(EmbeddingRecord {
            sample_id,
            client_id,
            class_label,
            embedding: l2_normalize(&values).map_err(|e| ScopeError::for_record(index, e))?,
        });
    }
    let dim = dim.ok_or_else(|| ScopeError::Malformed("csv has no records".into()))?;
    let num_classes =
        num_classes.unwrap_or_else(|| records.iter().map(|r| r.class_label + 1).max().unwrap_or(0));
    let file = EmbeddingFile {
        dim,
        num_classes,
        records,
    };
    file.validate()?;
    Ok(file)
}

/// Imports `class_id,v0,...` rows; several rows per class are prompt
/// variants and are averaged into one prototype.
pub fn import_prototypes_csv(path: &Path) -> Result<Vocabulary> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let mut variants: BTreeMap<u32, Vec<EmbeddingVector>> = BTreeMap::new();
    for (index, row) in reader.records().enumerate() {
        let row = row?;
        let class: u32 = parse_field(&row[0], "class_id", index)?;
        let values: Vec<f64> = row
            .iter()
            .skip(1)
            .map(|f| parse_field(f, "coordinate", index))
            .collect::<Result<_>>()?;
        let v = l2_normalize(&values).map_err(|e| ScopeError::for_record(index, e))?;
        variants.entry(class).or_default().push(v);
    }
    Vocabulary::new(
        variants
            .iter()
            .map(|(&c, vs)| build_prototype(c, vs))
            .collect::<Result<_>>()?,
    )
}
