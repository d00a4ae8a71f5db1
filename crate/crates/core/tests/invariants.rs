use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scope_core::aggregate::{ClassPolicy, GlobalPolicy};
use scope_core::federation::{
    dirichlet_partition, run_protocol, AccountingConfig, ProtocolRun, ScopeConfig,
};
use scope_core::geometry::{l2_normalize, Vocabulary};
use scope_core::scoring::{EmbeddingRecord, ScoreTriple};
use scope_core::select::{select_coreset, targeting, SelectConfig};

/// A small random federation with skewed class sizes.
fn federation(seed: u64) -> (Vec<EmbeddingRecord>, Vocabulary) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, dim) = (rng.random_range(2..=8u32), rng.random_range(1..=5u32), 8);
    let protos: Vec<_> = (0..m)
        .map(|_| {
            let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            l2_normalize(&g).unwrap()
        })
        .collect();
    let counts: Vec<u64> = (0..m).map(|c| 5 + 60 / (c as u64 + 1)).collect();
    let assignment = dirichlet_partition(&counts, k, 0.5, seed).unwrap();
    let mut records = Vec::new();
    for (&client, classes) in &assignment {
        for (&class, &n) in classes {
            for _ in 0..n {
                let v: Vec<f64> = protos[class as usize]
                    .as_slice()
                    .iter()
                    .map(|t| t + 0.4 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                records.push(EmbeddingRecord {
                    sample_id: records.len() as u64,
                    client_id: client,
                    class_label: class,
                    embedding: l2_normalize(&v).unwrap(),
                });
            }
        }
    }
    (records, Vocabulary::from_vectors(protos).unwrap())
}

fn run(records: &[EmbeddingRecord], vocab: &Vocabulary, select: SelectConfig) -> ProtocolRun {
    let scope = ScopeConfig {
        select,
        ..ScopeConfig::default()
    };
    run_protocol(records, vocab, &scope, &AccountingConfig::default()).unwrap()
}

fn select_config() -> impl Strategy<Value = SelectConfig> {
    (0.0..0.6f64, 0.0..0.95f64, 0.0..=1.0f64).prop_map(|(p_l, p_f, beta)| SelectConfig {
        p_l,
        p_f,
        beta,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_stage_order_and_tail_preservation(seed in 0u64..10_000, cfg in select_config()) {
        let (records, vocab) = federation(seed);
        let out = run(&records, &vocab, cfg);
        let label: BTreeMap<u64, u32> = records.iter().map(|r| (r.sample_id, r.class_label)).collect();

        let mut universe = BTreeSet::new();
        for d in out.decisions.values() {
            let n_k = records.iter().filter(|r| r.client_id == d.client_id).count();
            prop_assert_eq!(d.kept.len() + d.pruned_noise.len() + d.pruned_redundant.len(), n_k);
            prop_assert!(d.pruned_noise.is_disjoint(&d.pruned_redundant));
            prop_assert!(d.pruned_noise.is_disjoint(&d.kept));
            // Redundancy is only scored on the post-filter set.
            prop_assert!(d.redundancy_scores.keys().all(|id| !d.pruned_noise.contains(id)));

            for c in vocab.iter().map(|p| p.class_id).filter(|c| !d.target_classes.contains(c)) {
                let after_stage_one = records
                    .iter()
                    .filter(|r| r.client_id == d.client_id && r.class_label == c && !d.pruned_noise.contains(&r.sample_id))
                    .count();
                let kept = d.kept.iter().filter(|id| label[id] == c).count();
                prop_assert_eq!(kept, after_stage_one);
            }
            universe.extend(&d.kept);
            universe.extend(&d.pruned_noise);
            universe.extend(&d.pruned_redundant);
        }
        let ids: BTreeSet<u64> = label.keys().copied().collect();
        prop_assert_eq!(universe, ids);
    }

    #[test]
    fn raising_p_f_only_adds_redundant_prunes(seed in 0u64..10_000, cfg in select_config(), extra in 0.0..0.5f64) {
        let (records, vocab) = federation(seed);
        let low = run(&records, &vocab, cfg);
        let high = run(&records, &vocab, SelectConfig { p_f: (cfg.p_f + extra).min(0.99), ..cfg });
        for (k, d) in &low.decisions {
            prop_assert!(d.pruned_redundant.is_subset(&high.decisions[k].pruned_redundant));
        }
    }

    #[test]
    fn input_order_does_not_matter(seed in 0u64..10_000, cfg in select_config(), shuffle in any::<u64>()) {
        let (records, vocab) = federation(seed);
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let a = run(&records, &vocab, cfg);
        let b = run(&shuffled, &vocab, cfg);
        prop_assert_eq!(&a.report, &b.report);
        for (k, d) in &a.decisions {
            let e = &b.decisions[k];
            prop_assert_eq!(&d.kept, &e.kept);
            prop_assert_eq!(&d.pruned_noise, &e.pruned_noise);
            prop_assert_eq!(&d.pruned_redundant, &e.pruned_redundant);
        }
    }

    #[test]
    fn targeting_is_invariant_to_joint_weight_and_epsilon_scaling(
        seed in 0u64..10_000,
        beta in 0.0..=1.0f64,
        scale in 0.01..100.0f64,
    ) {
        let (records, vocab) = federation(seed);
        let policy = run(&records, &vocab, SelectConfig::default()).report.policy;
        let mut scaled = policy.clone();
        for cp in scaled.classes.values_mut() {
            cp.weight *= scale;
        }
        for client in records.iter().map(|r| r.client_id).collect::<BTreeSet<_>>() {
            let mut counts = BTreeMap::new();
            for r in records.iter().filter(|r| r.client_id == client) {
                *counts.entry(r.class_label).or_insert(0u64) += 1;
            }
            // T scales by 1/scale, so the margin's epsilon must too.
            let base = targeting(&policy, &counts, beta, 1e-3).unwrap();
            let moved = targeting(&scaled, &counts, beta, 1e-3 / scale).unwrap();
            prop_assert_eq!(base, moved);
        }
    }
}

/// With identical global moments on all three metrics, `AS > 0` reduces to
/// `s_neg > rs`, so anything pruned as noise sits in the anomaly zone.
#[test]
fn pruned_noise_lies_in_the_anomaly_zone() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let mu = rng.random_range(0.2..0.6);
        let var = rng.random_range(0.001..0.05);
        let policy = GlobalPolicy {
            gamma: 1.0,
            epsilon: 1e-8,
            classes: (0..3)
                .map(|c| {
                    (
                        c,
                        ClassPolicy {
                            count: 100,
                            frequency: 1.0 / 3.0,
                            weight: 1.0,
                            mean: [mu; 3],
                            variance: [var; 3],
                        },
                    )
                })
                .collect(),
        };
        let mut labels = BTreeMap::new();
        let mut scores = BTreeMap::new();
        let mut zone = 0;
        for id in 0..120u64 {
            let rs = mu + rng.random_range(-0.3..0.3);
            let s_neg = if rng.random::<f64>() < 0.2 {
                rs + rng.random_range(0.01..0.2)
            } else {
                rs - rng.random_range(0.01..0.2)
            };
            zone += usize::from(s_neg > rs);
            labels.insert(id, (id % 3) as u32);
            scores.insert(
                id,
                ScoreTriple {
                    rs,
                    ds: rng.random(),
                    s_neg,
                },
            );
        }
        let p_l = rng.random_range(0.0..0.1);
        let cfg = SelectConfig {
            p_l,
            ..SelectConfig::default()
        };
        let d = select_coreset(0, &labels, &scores, &policy, &cfg).unwrap();
        assert!(d.pruned_noise.len() <= zone);
        for id in &d.pruned_noise {
            assert!(
                scores[id].s_neg > scores[id].rs,
                "sample {id} pruned outside the zone"
            );
        }
    }
}

#[test]
fn zero_rates_keep_everything() {
    let (records, vocab) = federation(5);
    let out = run(
        &records,
        &vocab,
        SelectConfig {
            p_l: 0.0,
            p_f: 0.0,
            beta: 0.5,
        },
    );
    let kept: usize = out.decisions.values().map(|d| d.kept.len()).sum();
    assert_eq!(kept, records.len());
}
