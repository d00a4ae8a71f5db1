//! Simulation harness: long-tailed Dirichlet partitioning, synthetic
//! embeddings, one protocol round, communication accounting and a FedAvg
//! linear probe for coreset-versus-full comparisons.

pub mod partition;
pub mod probe;
pub mod protocol;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::EmbeddingVector;
use crate::scoring::EmbeddingRecord;
use crate::select::SelectConfig;

pub use partition::{dirichlet_partition, longtail_counts, Assignment, PartitionConfig};
pub use probe::{drift_proxy, fedavg_probe, LinearProbe, ProbeConfig, Sample};
pub use protocol::{
    random_subsets, run_protocol, table_accounting, AccountingConfig, ByteAccounting, ProtocolRun,
    RoundReport, ScopeConfig,
};
pub use synth::{synth_embeddings, synth_test_set, SynthConfig, SyntheticData};

/// Independent ChaCha stream `stream` under `seed`.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Every knob of a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scope: ScopeConfig,
    pub partition: PartitionConfig,
    pub dim: usize,
    pub separation_deg: f64,
    pub tangent_sigma: f64,
    pub noise_fraction: f64,
    pub probe: ProbeConfig,
    pub test_per_class: usize,
    pub accounting: AccountingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scope: ScopeConfig::default(),
            partition: PartitionConfig {
                num_clients: 10,
                num_classes: 10,
                dirichlet_alpha: 0.1,
                imbalance_ratio: 10.0,
                n_max: 500,
                seed: 0,
            },
            dim: 64,
            separation_deg: 90.0,
            tangent_sigma: 0.25,
            noise_fraction: 0.1,
            probe: ProbeConfig::default(),
            test_per_class: 100,
            accounting: AccountingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            dim: self.dim,
            separation_deg: self.separation_deg,
            tangent_sigma: self.tangent_sigma,
            noise_fraction: self.noise_fraction,
            seed: self.partition.seed,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.partition.seed,
            ..self.probe
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scope.select.validate()?;
        crate::aggregate::rarity_weights(
            &BTreeMap::from([(0, 1)]),
            self.scope.gamma,
            self.scope.epsilon,
        )?;
        self.partition.validate()?;
        self.synth().validate()?;
        self.probe.validate()?;
        if self.accounting.scalars_per_class < 1 || self.accounting.bytes_per_scalar < 1 {
            return Err(crate::ScopeError::Config(
                "federation: scalars_per_class and bytes_per_scalar must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.partition.seed = seed;
        self
    }

    pub fn with_select(mut self, select: SelectConfig) -> Self {
        self.scope.select = select;
        self
    }
}

/// Labeled data of the federation, generated from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Fixture {
    pub class_counts: Vec<u64>,
    pub assignment: Assignment,
    pub data: SyntheticData,
    pub test: Vec<(EmbeddingVector, u32)>,
}

impl Fixture {
    pub fn generate(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let p = &config.partition;
        let class_counts = longtail_counts(p.num_classes, p.imbalance_ratio, p.n_max)?;
        let assignment =
            dirichlet_partition(&class_counts, p.num_clients, p.dirichlet_alpha, p.seed)?;
        let data = synth_embeddings(&assignment, p.num_classes, &config.synth())?;
        let test = synth_test_set(
            &data.prototypes,
            config.test_per_class,
            config.tangent_sigma,
            p.seed,
        );
        Ok(Fixture {
            class_counts,
            assignment,
            data,
            test,
        })
    }

    pub fn test_samples(&self) -> Vec<Sample<'_>> {
        self.test
            .iter()
            .map(|(x, y)| Sample {
                x: x.as_slice(),
                y: *y,
            })
            .collect()
    }

    /// Per-client training shards for clients `0..K`, optionally restricted
    /// to the given kept ids.
    pub fn shards(&self, keep: Option<&BTreeMap<u32, BTreeSet<u64>>>) -> Vec<Vec<Sample<'_>>> {
        shards_of(&self.data.records, self.assignment.len(), keep)
    }
}

/// Splits records into per-client shards, keeping only ids in `keep` when given.
pub fn shards_of<'a>(
    records: &'a [EmbeddingRecord],
    num_clients: usize,
    keep: Option<&BTreeMap<u32, BTreeSet<u64>>>,
) -> Vec<Vec<Sample<'a>>> {
    let mut shards = vec![Vec::new(); num_clients];
    for r in records {
        let k = r.client_id as usize;
        if k >= num_clients {
            continue;
        }
        let kept = keep.is_none_or(|m| {
            m.get(&r.client_id)
                .is_some_and(|s| s.contains(&r.sample_id))
        });
        if kept {
            shards[k].push(Sample {
                x: r.embedding.as_slice(),
                y: r.class_label,
            });
        }
    }
    shards
}

pub fn kept_sets(run: &ProtocolRun) -> BTreeMap<u32, BTreeSet<u64>> {
    run.decisions
        .iter()
        .map(|(&k, d)| (k, d.kept.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecovery {
    pub planted: usize,
    pub caught: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurves {
    pub full: Vec<f64>,
    pub coreset: Vec<f64>,
    pub random: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub raw: f64,
    pub coreset: f64,
    pub ratio: f64,
}

/// Everything `simulate` writes out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: RunConfig,
    pub class_counts: Vec<u64>,
    pub full_size: usize,
    pub coreset_size: usize,
    pub round: RoundReport,
    pub noise: NoiseRecovery,
    pub accuracy: AccuracyCurves,
    pub drift: DriftReport,
}

pub struct Simulation {
    pub fixture: Fixture,
    pub run: ProtocolRun,
    pub report: SimulationReport,
}

/// Recall of planted noise among the samples pruned in stage one.
pub fn noise_recovery(noisy: &BTreeSet<u64>, run: &ProtocolRun) -> NoiseRecovery {
    let caught = run
        .decisions
        .values()
        .map(|d| d.pruned_noise.intersection(noisy).count())
        .sum();
    NoiseRecovery {
        planted: noisy.len(),
        caught,
        recall: if noisy.is_empty() {
            1.0
        } else {
            caught as f64 / noisy.len() as f64
        },
    }
}

/// Gradient dispersion on raw and coreset shards at the zero probe.
pub fn drift_report(
    fixture: &Fixture,
    kept: &BTreeMap<u32, BTreeSet<u64>>,
    classes: usize,
) -> DriftReport {
    let zero = LinearProbe::zeros(classes, fixture.data.prototypes.dim());
    let raw = drift_proxy(&fixture.shards(None), &zero);
    let coreset = drift_proxy(&fixture.shards(Some(kept)), &zero);
    DriftReport {
        raw,
        coreset,
        ratio: if raw > 0.0 { coreset / raw } else { 0.0 },
    }
}

/// Full pipeline: data, one protocol round, probes on full, coreset and
/// random subsets, drift.
pub fn simulate(config: &RunConfig) -> Result<Simulation> {
    let fixture = Fixture::generate(config)?;
    let run = run_protocol(
        &fixture.data.records,
        &fixture.data.prototypes,
        &config.scope,
        &config.accounting,
    )?;
    let classes = config.partition.num_classes as usize;
    let kept = kept_sets(&run);
    let random = random_subsets(&fixture.data.records, &run.decisions, config.partition.seed)?;
    let test = fixture.test_samples();
    let probe = config.probe();

    let accuracy = AccuracyCurves {
        full: fedavg_probe(&fixture.shards(None), &test, classes, &probe)?,
        coreset: fedavg_probe(&fixture.shards(Some(&kept)), &test, classes, &probe)?,
        random: fedavg_probe(&fixture.shards(Some(&random)), &test, classes, &probe)?,
    };
    let report = SimulationReport {
        config: *config,
        class_counts: fixture.class_counts.clone(),
        full_size: fixture.data.records.len(),
        coreset_size: kept.values().map(BTreeSet::len).sum(),
        noise: noise_recovery(&fixture.data.noisy, &run),
        drift: drift_report(&fixture, &kept, classes),
        round: run.report.clone(),
        accuracy,
    };
    Ok(Simulation {
        fixture,
        run,
        report,
    })
}

/// The grids swept by default.
pub const PRUNE_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const BETA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const IR_GRID: [f64; 3] = [2.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub client_id: u32,
    pub target_classes: usize,
    pub kept: usize,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrunePoint {
    pub imbalance_ratio: f64,
    pub p_f: f64,
    pub coreset_size: usize,
    pub full_accuracy: f64,
    pub coreset_accuracy: f64,
    pub random_accuracy: f64,
}

fn final_acc(curve: &[f64]) -> f64 {
    curve.last().copied().unwrap_or(0.0)
}

/// Target-set size per client and coreset accuracy for each beta, on one fixture.
pub fn beta_sweep(config: &RunConfig, betas: &[f64]) -> Result<Vec<BetaPoint>> {
    let fixture = Fixture::generate(config)?;
    let test = fixture.test_samples();
    let classes = config.partition.num_classes as usize;
    let mut out = Vec::new();
    for &beta in betas {
        let mut scope = config.scope;
        scope.select.beta = beta;
        let run = run_protocol(
            &fixture.data.records,
            &fixture.data.prototypes,
            &scope,
            &config.accounting,
        )?;
        let kept = kept_sets(&run);
        let acc = final_acc(&fedavg_probe(
            &fixture.shards(Some(&kept)),
            &test,
            classes,
            &config.probe(),
        )?);
        for (k, d) in &run.decisions {
            out.push(BetaPoint {
                beta,
                client_id: *k,
                target_classes: d.target_classes.len(),
                kept: d.kept.len(),
                final_accuracy: acc,
            });
        }
    }
    Ok(out)
}

/// Accuracy against `p_f` for each imbalance ratio.
pub fn prune_sweep(config: &RunConfig, ratios: &[f64], rates: &[f64]) -> Result<Vec<PrunePoint>> {
    let mut out = Vec::new();
    for &ir in ratios {
        let mut cfg = *config;
        cfg.partition.imbalance_ratio = ir;
        let fixture = Fixture::generate(&cfg)?;
        let test = fixture.test_samples();
        let classes = cfg.partition.num_classes as usize;
        let probe = cfg.probe();
        let full = final_acc(&fedavg_probe(
            &fixture.shards(None),
            &test,
            classes,
            &probe,
        )?);
        for &p_f in rates {
            let mut scope = cfg.scope;
            scope.select.p_f = p_f;
            let run = run_protocol(
                &fixture.data.records,
                &fixture.data.prototypes,
                &scope,
                &cfg.accounting,
            )?;
            let kept = kept_sets(&run);
            let random = random_subsets(&fixture.data.records, &run.decisions, cfg.partition.seed)?;
            out.push(PrunePoint {
                imbalance_ratio: ir,
                p_f,
                coreset_size: kept.values().map(BTreeSet::len).sum(),
                full_accuracy: full,
                coreset_accuracy: final_acc(&fedavg_probe(
                    &fixture.shards(Some(&kept)),
                    &test,
                    classes,
                    &probe,
                )?),
                random_accuracy: final_acc(&fedavg_probe(
                    &fixture.shards(Some(&random)),
                    &test,
                    classes,
                    &probe,
                )?),
            });
        }
    }
    Ok(out)
}
