//! Embedding-space primitives.
//!
//! All arithmetic runs in `f64`, whatever precision the embeddings were
//! stored in. Vectors handed to scoring are unit-norm [`EmbeddingVector`]s;
//! class prototypes are averaged from several text-embedding variants and
//! re-normalized.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};

/// Norms below this are treated as the zero vector.
pub const MIN_NORM: f64 = 1e-12;

/// Maximum deviation from unit length accepted for an already-normalized vector.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A unit-norm embedding of dimension at least 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Accepts `values` unchanged when already unit-norm within
    /// [`UNIT_NORM_TOL`], otherwise normalizes them.
    ///
    /// Vectors read back from `f32` storage stay bit-identical this way.
    pub fn from_stored(values: Vec<f64>) -> Result<Self> {
        check_dim(values.len())?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() <= UNIT_NORM_TOL {
            Ok(EmbeddingVector(values))
        } else {
            l2_normalize(&values)
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// Raw dot product, unclamped.
    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(ScopeError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(dot(&self.0, &other.0))
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(ScopeError::Malformed(format!(
            "embedding dimension must be at least 2, got {dim}"
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &[f64]) -> Result<EmbeddingVector> {
    check_dim(v.len())?;
    let norm = l2_norm(v);
    if norm.is_nan() || norm < MIN_NORM {
        return Err(ScopeError::ZeroVector { norm });
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / norm).collect()))
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(a.dot(b)?.clamp(-1.0, 1.0))
}

/// Unit-norm text centroid for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: u32,
    pub vector: EmbeddingVector,
}

fn lexicographic(a: &EmbeddingVector, b: &EmbeddingVector) -> Ordering {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Averages prompt variants of a class and re-normalizes the mean.
///
/// Variants are sorted lexicographically before summation, so the result is
/// bitwise independent of the order they are passed in.
pub fn build_prototype(class_id: u32, variants: &[EmbeddingVector]) -> Result<ClassPrototype> {
    let first = variants
        .first()
        .ok_or_else(|| ScopeError::Malformed(format!("class {class_id}: no prompt variants")))?;
    let dim = first.dim();
    if let Some(bad) = variants.iter().find(|v| v.dim() != dim) {
        return Err(ScopeError::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }

    let mut sorted: Vec<&EmbeddingVector> = variants.iter().collect();
    sorted.sort_by(|a, b| lexicographic(a, b));

    let mut mean = vec![0.0; dim];
    for v in sorted {
        for (acc, x) in mean.iter_mut().zip(v.as_slice()) {
            *acc += x;
        }
    }
    let count = variants.len() as f64;
    mean.iter_mut().for_each(|x| *x /= count);

    Ok(ClassPrototype {
        class_id,
        vector: l2_normalize(&mean)?,
    })
}

/// The global class vocabulary: exactly one prototype per class id `0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    prototypes: Vec<ClassPrototype>,
}

impl Vocabulary {
    pub fn new(mut prototypes: Vec<ClassPrototype>) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(ScopeError::InvalidVocabulary("no prototypes".into()));
        }
        prototypes.sort_by_key(|p| p.class_id);
        for (expected, p) in prototypes.iter().enumerate() {
            if p.class_id as usize != expected {
                return Err(ScopeError::InvalidVocabulary(format!(
                    "class ids must be exactly 0..{}, found {} at position {expected}",
                    prototypes.len(),
                    p.class_id
                )));
            }
        }
        let dim = prototypes[0].vector.dim();
        if let Some(bad) = prototypes.iter().find(|p| p.vector.dim() != dim) {
            return Err(ScopeError::DimensionMismatch {
                expected: dim,
                found: bad.vector.dim(),
            });
        }
        Ok(Vocabulary { prototypes })
    }

    /// Builds a vocabulary from raw prototype vectors indexed by class id.
    pub fn from_vectors(vectors: Vec<EmbeddingVector>) -> Result<Self> {
        Self::new(
            vectors
                .into_iter()
                .enumerate()
                .map(|(i, vector)| ClassPrototype {
                    class_id: i as u32,
                    vector,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].vector.dim()
    }

    pub fn get(&self, class: u32) -> Result<&EmbeddingVector> {
        self.prototypes
            .get(class as usize)
            .map(|p| &p.vector)
            .ok_or(ScopeError::UnknownClass { class })
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.prototypes.iter()
    }
}
