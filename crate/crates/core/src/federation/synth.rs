//! Synthetic embeddings on the unit sphere.
//!
//! Prototypes are a randomly rotated, mutually separated frame. A clean
//! sample is its class prototype plus isotropic Gaussian noise in the
//! tangent space, re-normalized. A planted-noise sample keeps its label but
//! is generated around a different class's prototype.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::partition::Assignment;
use super::rng_for;
use crate::error::{Result, ScopeError};
use crate::geometry::{dot, l2_normalize, EmbeddingVector, Vocabulary};
use crate::scoring::EmbeddingRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    /// Minimum pairwise angle between prototypes, in degrees.
    pub separation_deg: f64,
    /// Per-coordinate standard deviation of the tangent noise.
    pub tangent_sigma: f64,
    /// Fraction of each client's samples generated from a wrong class.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ScopeError::Config(format!("synth: {msg}")));
        if self.dim < 2 {
            return fail(format!("dim must be >= 2, got {}", self.dim));
        }
        if !(0.0..=180.0).contains(&self.separation_deg) {
            return fail(format!(
                "separation_deg must be in [0, 180], got {}",
                self.separation_deg
            ));
        }
        if !(self.tangent_sigma >= 0.0 && self.tangent_sigma.is_finite()) {
            return fail(format!(
                "tangent_sigma must be finite and >= 0, got {}",
                self.tangent_sigma
            ));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return fail(format!(
                "noise_fraction must be in [0, 1), got {}",
                self.noise_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub records: Vec<EmbeddingRecord>,
    pub prototypes: Vocabulary,
    /// Ids of the planted-noise samples.
    pub noisy: BTreeSet<u64>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `count` random orthonormal vectors (`count <= dim`).
fn random_orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let proj = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        if let Ok(u) = l2_normalize(&v) {
            basis.push(u.into_inner());
        }
    }
    basis
}

/// Places `num_classes` unit prototypes with pairwise angle at least `separation_deg`.
pub fn make_prototypes(
    num_classes: usize,
    dim: usize,
    separation_deg: f64,
    seed: u64,
) -> Result<Vocabulary> {
    let infeasible = || ScopeError::InfeasibleSeparation {
        classes: num_classes,
        dim,
        separation_deg,
    };
    let mut rng = rng_for(seed, 0x5052_4f54);
    let m = num_classes;
    let vectors: Vec<Vec<f64>> = if separation_deg <= 90.0 && m <= dim {
        random_orthonormal(&mut rng, m, dim)
    } else if separation_deg > 90.0 {
        // centred regular simplex; widest possible spread for m points
        let simplex_deg = (-1.0 / (m as f64 - 1.0)).acos().to_degrees();
        if m < 2 || m > dim || separation_deg > simplex_deg + 1e-9 {
            return Err(infeasible());
        }
        let q = random_orthonormal(&mut rng, m, dim);
        (0..m)
            .map(|i| {
                let v: Vec<f64> = (0..dim)
                    .map(|d| q[i][d] - q.iter().map(|row| row[d]).sum::<f64>() / m as f64)
                    .collect();
                l2_normalize(&v).map(EmbeddingVector::into_inner)
            })
            .collect::<Result<_>>()?
    } else {
        // more classes than dimensions: rejection sampling on the sphere
        if separation_deg >= 90.0 - 1e-9 {
            return Err(infeasible());
        }
        let max_cos = separation_deg.to_radians().cos();
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut attempts = 0usize;
        while accepted.len() < m {
            attempts += 1;
            if attempts > 2000 * m {
                return Err(infeasible());
            }
            let Ok(u) = l2_normalize(&gaussian(&mut rng, dim)) else {
                continue;
            };
            let u = u.into_inner();
            if accepted.iter().all(|a| dot(a, &u) <= max_cos + 1e-12) {
                accepted.push(u);
            }
        }
        accepted
    };
    Vocabulary::from_vectors(
        vectors
            .into_iter()
            .map(EmbeddingVector::from_stored)
            .collect::<Result<_>>()?,
    )
}

/// One sample around `prototype`: tangent Gaussian noise, re-normalized.
pub fn sample_around(
    prototype: &EmbeddingVector,
    tangent_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> EmbeddingVector {
    let t = prototype.as_slice();
    let mut g = gaussian(rng, t.len());
    g.iter_mut().for_each(|x| *x *= tangent_sigma);
    let proj = dot(&g, t);
    let v: Vec<f64> = t
        .iter()
        .zip(&g)
        .map(|(ti, gi)| ti + gi - proj * ti)
        .collect();
    // the tangent component is orthogonal to a unit prototype, so |v| >= 1
    l2_normalize(&v).expect("norm is at least one")
}

/// Generates records for every `(client, class, count)` in `assignment`.
///
/// Ids are assigned sequentially by ascending client, then class. On each
/// client, `floor(noise_fraction * N_k)` samples are drawn from a uniformly
/// chosen wrong class while keeping their label.
pub fn synth_embeddings(
    assignment: &Assignment,
    num_classes: u32,
    config: &SynthConfig,
) -> Result<SyntheticData> {
    config.validate()?;
    if num_classes < 2 {
        return Err(ScopeError::Config(format!(
            "synth: num_classes must be >= 2, got {num_classes}"
        )));
    }
    let prototypes = make_prototypes(
        num_classes as usize,
        config.dim,
        config.separation_deg,
        config.seed,
    )?;

    let mut records = Vec::new();
    let mut noisy = BTreeSet::new();
    let mut next_id = 0u64;
    for (&client, classes) in assignment {
        let mut rng = rng_for(config.seed, 0x434c_0000_0000 | client as u64);
        let mut labels: Vec<u32> = Vec::new();
        for (&class, &n) in classes {
            if class >= num_classes {
                return Err(ScopeError::UnknownClass { class });
            }
            labels.extend(std::iter::repeat_n(class, n as usize));
        }
        let n_noisy = ((config.noise_fraction * labels.len() as f64) + 1e-9).floor() as usize;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let planted: BTreeSet<usize> = order[..n_noisy].iter().copied().collect();

        for (pos, &label) in labels.iter().enumerate() {
            let source = if planted.contains(&pos) {
                let offset = rng.random_range(1..num_classes);
                (label + offset) % num_classes
            } else {
                label
            };
            let embedding = sample_around(prototypes.get(source)?, config.tangent_sigma, &mut rng);
            if source != label {
                noisy.insert(next_id);
            }
            records.push(EmbeddingRecord {
                sample_id: next_id,
                client_id: client,
                class_label: label,
                embedding,
            });
            next_id += 1;
        }
    }
    Ok(SyntheticData {
        records,
        prototypes,
        noisy,
    })
}

/// Balanced clean held-out samples, `per_class` for every prototype.
pub fn synth_test_set(
    prototypes: &Vocabulary,
    per_class: usize,
    tangent_sigma: f64,
    seed: u64,
) -> Vec<(EmbeddingVector, u32)> {
    let mut rng = rng_for(seed, 0x5445_5354);
    let mut out = Vec::with_capacity(per_class * prototypes.len());
    for p in prototypes.iter() {
        for _ in 0..per_class {
            out.push((
                sample_around(&p.vector, tangent_sigma, &mut rng),
                p.class_id,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cosine;
    use crate::scoring::score_sample;
    use std::collections::BTreeMap;

    fn cfg(dim: usize, sigma: f64, noise: f64) -> SynthConfig {
        SynthConfig {
            dim,
            separation_deg: 90.0,
            tangent_sigma: sigma,
            noise_fraction: noise,
            seed: 5,
        }
    }

    fn min_angle(v: &Vocabulary) -> f64 {
        let mut worst: f64 = 180.0;
        for a in v.iter() {
            for b in v.iter().filter(|b| b.class_id != a.class_id) {
                worst = worst.min(cosine(&a.vector, &b.vector).unwrap().acos().to_degrees());
            }
        }
        worst
    }

    #[test]
    fn prototype_layouts() {
        let ortho = make_prototypes(10, 64, 90.0, 1).unwrap();
        assert!(min_angle(&ortho) >= 90.0 - 1e-9);
        let simplex = make_prototypes(5, 8, 104.0, 1).unwrap();
        assert!(min_angle(&simplex) >= 104.0);
        let dense = make_prototypes(12, 4, 40.0, 1).unwrap();
        assert!(min_angle(&dense) >= 40.0 - 1e-6);
        for p in dense.iter() {
            assert!((p.vector.norm() - 1.0).abs() < 1e-12);
        }

        assert!(matches!(
            make_prototypes(5, 4, 90.0, 1),
            Err(ScopeError::InfeasibleSeparation { .. })
        ));
        assert!(make_prototypes(5, 8, 110.0, 1).is_err());
    }

    #[test]
    fn zero_noise_has_no_flags() {
        let assignment = BTreeMap::from([(0, BTreeMap::from([(0, 20), (1, 5)]))]);
        let data = synth_embeddings(&assignment, 2, &cfg(8, 0.2, 0.0)).unwrap();
        assert!(data.noisy.is_empty());
        assert_eq!(data.records.len(), 25);
    }

    #[test]
    fn noiseless_orthonormal_scores() {
        let assignment = BTreeMap::from([
            (0, BTreeMap::from([(0, 3), (2, 4)])),
            (1, BTreeMap::from([(1, 5)])),
        ]);
        let data = synth_embeddings(&assignment, 3, &cfg(3, 0.0, 0.0)).unwrap();
        for r in &data.records {
            let s = score_sample(r, &data.prototypes).unwrap();
            assert!((s.rs - 1.0).abs() < 1e-12);
            assert!(s.s_neg.abs() < 1e-12);
        }
        let ids: Vec<u64> = data.records.iter().map(|r| r.sample_id).collect();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn noise_is_planted_per_client() {
        let assignment = BTreeMap::from([
            (0, BTreeMap::from([(0, 60), (1, 40)])),
            (1, BTreeMap::from([(1, 30)])),
        ]);
        let data = synth_embeddings(&assignment, 4, &cfg(16, 0.1, 0.1)).unwrap();
        let per_client = |k| {
            data.records
                .iter()
                .filter(|r| r.client_id == k && data.noisy.contains(&r.sample_id))
                .count()
        };
        assert_eq!(per_client(0), 10);
        assert_eq!(per_client(1), 3);
    }

    #[test]
    fn planted_noise_leans_to_the_wrong_class() {
        // Monte Carlo over 2000 planted samples: S_neg >= RS in >= 95% of draws.
        let assignment = BTreeMap::from([(0, (0..10).map(|c| (c, 200u64)).collect())]);
        let mut config = cfg(64, 0.1, 0.5);
        config.seed = 77;
        let data = synth_embeddings(&assignment, 10, &config).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for r in data
            .records
            .iter()
            .filter(|r| data.noisy.contains(&r.sample_id))
        {
            let s = score_sample(r, &data.prototypes).unwrap();
            total += 1;
            if s.s_neg >= s.rs {
                hits += 1;
            }
        }
        assert!(total >= 1000);
        assert!(hits as f64 / total as f64 >= 0.95, "{hits}/{total}");
    }

    #[test]
    fn test_set_is_balanced() {
        let protos = make_prototypes(4, 8, 90.0, 2).unwrap();
        let t = synth_test_set(&protos, 25, 0.1, 3);
        assert_eq!(t.len(), 100);
        for c in 0..4 {
            assert_eq!(t.iter().filter(|(_, l)| *l == c).count(), 25);
        }
    }
}
