use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use scope_core::aggregate::GlobalPolicy;
use scope_core::federation::{
    self, beta_sweep, dirichlet_partition, longtail_counts, protocol, prune_sweep,
    synth_embeddings, table_accounting, AccountingConfig, RunConfig,
};
use scope_core::io::{self, config, EmbeddingFile};
use scope_core::profile::UplinkMessage;
use scope_core::scoring::UNASSIGNED_CLIENT;
use scope_core::select::{select_coreset, DispositionCounts};
use scope_core::{Result, ScopeError};

#[derive(Parser)]
#[command(
    name = "scope",
    version,
    about = "Federated semantic coreset selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run config file plus per-key overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long = "p_l", alias = "p-l", global = true)]
    p_l: Option<String>,
    #[arg(long = "p_f", alias = "p-f", global = true)]
    p_f: Option<String>,
    #[arg(long, global = true)]
    beta: Option<String>,
    #[arg(long, global = true)]
    gamma: Option<String>,
    #[arg(long, global = true)]
    epsilon: Option<String>,
    #[arg(long = "num_clients", alias = "num-clients", global = true)]
    num_clients: Option<String>,
    #[arg(long = "num_classes", alias = "num-classes", global = true)]
    num_classes: Option<String>,
    #[arg(long = "dirichlet_alpha", alias = "dirichlet-alpha", global = true)]
    dirichlet_alpha: Option<String>,
    #[arg(long = "imbalance_ratio", alias = "imbalance-ratio", global = true)]
    imbalance_ratio: Option<String>,
    #[arg(long = "n_max", alias = "n-max", global = true)]
    n_max: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    dim: Option<String>,
    #[arg(long = "separation_deg", alias = "separation-deg", global = true)]
    separation_deg: Option<String>,
    #[arg(long = "tangent_sigma", alias = "tangent-sigma", global = true)]
    tangent_sigma: Option<String>,
    #[arg(long = "noise_fraction", alias = "noise-fraction", global = true)]
    noise_fraction: Option<String>,
    #[arg(long, global = true)]
    rounds: Option<String>,
    #[arg(long = "local_epochs", alias = "local-epochs", global = true)]
    local_epochs: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    #[arg(long = "batch_size", alias = "batch-size", global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    participation: Option<String>,
    #[arg(long = "test_per_class", alias = "test-per-class", global = true)]
    test_per_class: Option<String>,
    #[arg(long = "scalars_per_class", alias = "scalars-per-class", global = true)]
    scalars_per_class: Option<String>,
    #[arg(long = "bytes_per_scalar", alias = "bytes-per-scalar", global = true)]
    bytes_per_scalar: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => config::load_config(path).map_err(|e| match e {
                ScopeError::Io(io) => {
                    ScopeError::Config(format!("cannot read {}: {io}", path.display()))
                }
                other => other,
            })?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("p_l", &self.p_l),
            ("p_f", &self.p_f),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("epsilon", &self.epsilon),
            ("num_clients", &self.num_clients),
            ("num_classes", &self.num_classes),
            ("dirichlet_alpha", &self.dirichlet_alpha),
            ("imbalance_ratio", &self.imbalance_ratio),
            ("n_max", &self.n_max),
            ("seed", &self.seed),
            ("dim", &self.dim),
            ("separation_deg", &self.separation_deg),
            ("tangent_sigma", &self.tangent_sigma),
            ("noise_fraction", &self.noise_fraction),
            ("rounds", &self.rounds),
            ("local_epochs", &self.local_epochs),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("participation", &self.participation),
            ("test_per_class", &self.test_per_class),
            ("scalars_per_class", &self.scalars_per_class),
            ("bytes_per_scalar", &self.bytes_per_scalar),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config::apply(&mut cfg, key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a long-tailed synthetic dataset (unassigned) and its prototypes.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        /// Optional list of planted-noise sample ids.
        #[arg(long)]
        noise_out: Option<PathBuf>,
    },
    /// Assign records to clients with Dirichlet label skew.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every record and write per-client uplink messages.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Reduce uplink messages into the global policy.
    Aggregate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of `uplink_*.bin` files.
        #[arg(long)]
        uplinks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the policy as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Select coresets for every client in a dataset.
    Select {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        /// Broadcast policy; computed from the data when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// `sample_id,disposition` lines.
        #[arg(long)]
        out: PathBuf,
        /// Per-client, per-class disposition counts as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Full pipeline on synthetic data: selection, probes, drift, bytes.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Sample-level dispositions of every client.
        #[arg(long)]
        dispositions: Option<PathBuf>,
    },
    /// Sweep p_f x IR and beta, writing plot-ready CSV files.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Uplink estimate for K clients x C classes x D dimensions.
    Bytes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "K")]
        k: u64,
        #[arg(long = "C")]
        c: u64,
        #[arg(long = "D")]
        d: u64,
        /// Scalars per (client, class); defaults to the config value.
        #[arg(long = "S")]
        s: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{category}]: {e}");
            ExitCode::from(match category {
                "config" => 2,
                "data" => 3,
                _ => 4,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            cfg,
            out,
            prototypes,
            noise_out,
        } => synth(&cfg.resolve()?, &out, &prototypes, noise_out.as_deref()),
        Command::Partition { cfg, data, out } => partition(&cfg.resolve()?, &data, &out),
        Command::Score {
            cfg,
            data,
            prototypes,
            out_dir,
        } => score(&cfg.resolve()?, &data, &prototypes, &out_dir),
        Command::Aggregate {
            cfg,
            uplinks,
            out,
            json,
        } => aggregate(&cfg.resolve()?, &uplinks, &out, json.as_deref()),
        Command::Select {
            cfg,
            data,
            prototypes,
            policy,
            out,
            report,
        } => select(
            &cfg.resolve()?,
            &data,
            &prototypes,
            policy.as_deref(),
            &out,
            report.as_deref(),
        ),
        Command::Simulate {
            cfg,
            out,
            dispositions,
        } => simulate(&cfg.resolve()?, &out, dispositions.as_deref()),
        Command::Sweep { cfg, out_dir } => sweep(&cfg.resolve()?, &out_dir),
        Command::Bytes { cfg, k, c, d, s } => {
            let cfg = cfg.resolve()?;
            let acct = AccountingConfig {
                scalars_per_class: s.unwrap_or(cfg.accounting.scalars_per_class),
                bytes_per_scalar: cfg.accounting.bytes_per_scalar,
            };
            if acct.scalars_per_class == 0 {
                return Err(ScopeError::Config("bytes: S must be >= 1".into()));
            }
            let row = table_accounting(k, c, d, &acct);
            println!("baseline_bytes {}", row.baseline_bytes);
            println!("scope_bytes {}", row.scope_bytes);
            println!("ratio {}", row.ratio);
            Ok(())
        }
    }
}

/// Prefixes I/O errors with the offending path.
fn at(path: &Path) -> impl Fn(ScopeError) -> ScopeError + '_ {
    move |e| match e {
        ScopeError::Io(io) => ScopeError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

fn synth(cfg: &RunConfig, out: &Path, prototypes: &Path, noise_out: Option<&Path>) -> Result<()> {
    let p = &cfg.partition;
    let counts = longtail_counts(p.num_classes, p.imbalance_ratio, p.n_max)?;
    let everything = BTreeMap::from([(
        0,
        counts
            .iter()
            .enumerate()
            .map(|(c, &n)| (c as u32, n))
            .collect(),
    )]);
    let mut data = synth_embeddings(&everything, p.num_classes, &cfg.synth())?;
    for r in &mut data.records {
        r.client_id = UNASSIGNED_CLIENT;
    }
    io::write_embeddings(
        out,
        &EmbeddingFile {
            dim: cfg.dim,
            num_classes: p.num_classes,
            records: data.records,
        },
    )?;
    io::write_prototypes(prototypes, &data.prototypes)?;
    if let Some(path) = noise_out {
        let ids: String = data.noisy.iter().map(|id| format!("{id}\n")).collect();
        fs::write(path, format!("sample_id\n{ids}"))?;
    }
    println!(
        "wrote {} records over {} classes",
        counts.iter().sum::<u64>(),
        counts.len()
    );
    Ok(())
}

fn partition(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let mut file = io::read_embeddings(data).map_err(at(data))?;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in file.records.iter().enumerate() {
        by_class.entry(r.class_label).or_default().push(i);
    }
    for members in by_class.values_mut() {
        members.sort_by_key(|&i| file.records[i].sample_id);
    }
    let counts: Vec<u64> = (0..file.num_classes)
        .map(|c| by_class.get(&c).map_or(0, |m| m.len() as u64))
        .collect();
    let p = &cfg.partition;
    let assignment = dirichlet_partition(&counts, p.num_clients, p.dirichlet_alpha, p.seed)?;

    for (class, members) in &by_class {
        let mut cursor = members.iter();
        for (&client, classes) in &assignment {
            let n = classes.get(class).copied().unwrap_or(0);
            for &i in cursor.by_ref().take(n as usize) {
                file.records[i].client_id = client;
            }
        }
    }
    io::write_embeddings(out, &file)?;
    let used = assignment.values().filter(|m| !m.is_empty()).count();
    println!(
        "assigned {} records to {used} of {} clients",
        file.records.len(),
        p.num_clients
    );
    Ok(())
}

fn load_inputs(
    data: &Path,
    prototypes: &Path,
) -> Result<(EmbeddingFile, scope_core::geometry::Vocabulary)> {
    let file = io::read_embeddings(data).map_err(at(data))?;
    let vocab = io::read_prototypes(prototypes).map_err(at(prototypes))?;
    if vocab.dim() != file.dim {
        return Err(ScopeError::DimensionMismatch {
            expected: vocab.dim(),
            found: file.dim,
        });
    }
    if vocab.len() != file.num_classes as usize {
        return Err(ScopeError::KeyMismatch(format!(
            "dataset has {} classes but {} prototypes",
            file.num_classes,
            vocab.len()
        )));
    }
    Ok((file, vocab))
}

fn score(_cfg: &RunConfig, data: &Path, prototypes: &Path, out_dir: &Path) -> Result<()> {
    let (file, vocab) = load_inputs(data, prototypes)?;
    let clients = protocol::group_by_client(&file.records)?;
    fs::create_dir_all(out_dir)?;
    let mut all_scores = BTreeMap::new();
    let mut owners = BTreeMap::new();
    for (k, recs) in &clients {
        let (scores, uplink) = protocol::client_phase_one(*k, recs, &vocab)?;
        fs::write(out_dir.join(format!("uplink_{k}.bin")), uplink.encode())?;
        owners.extend(
            recs.iter()
                .map(|r| (r.sample_id, (r.client_id, r.class_label))),
        );
        all_scores.extend(scores);
    }
    io::report::write_scores_csv(&out_dir.join("scores.csv"), &all_scores, &owners)?;
    println!(
        "scored {} records on {} clients",
        all_scores.len(),
        clients.len()
    );
    Ok(())
}

fn read_uplinks(dir: &Path) -> Result<Vec<UplinkMessage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| at(dir)(e.into()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("uplink_") && n.ends_with(".bin"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| UplinkMessage::decode(&fs::read(p)?))
        .collect()
}

fn aggregate(cfg: &RunConfig, dir: &Path, out: &Path, json: Option<&Path>) -> Result<()> {
    let uplinks = read_uplinks(dir)?;
    if uplinks.is_empty() {
        return Err(ScopeError::EmptyFederation);
    }
    let policy = GlobalPolicy::from_uplinks(
        &uplinks,
        cfg.partition.num_classes,
        cfg.scope.gamma,
        cfg.scope.epsilon,
    )?;
    fs::write(out, policy.encode())?;
    if let Some(path) = json {
        io::write_json(path, &policy)?;
    }
    println!(
        "aggregated {} uplinks ({} bytes) into a {}-byte policy",
        uplinks.len(),
        uplinks.iter().map(|u| u.payload_bytes).sum::<usize>(),
        policy.payload_bytes()
    );
    Ok(())
}

#[derive(Serialize)]
struct ClientSummary {
    client_id: u32,
    target_classes: BTreeSet<u32>,
    classes: BTreeMap<u32, DispositionCounts>,
}

fn select(
    cfg: &RunConfig,
    data: &Path,
    prototypes: &Path,
    policy_path: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let (file, vocab) = load_inputs(data, prototypes)?;
    let clients = protocol::group_by_client(&file.records)?;
    let mut phase_one = BTreeMap::new();
    for (k, recs) in &clients {
        phase_one.insert(*k, protocol::client_phase_one(*k, recs, &vocab)?);
    }
    let policy = match policy_path {
        Some(p) => GlobalPolicy::decode(&fs::read(p).map_err(|e| at(p)(e.into()))?)?,
        None => {
            let uplinks: Vec<UplinkMessage> = phase_one.values().map(|(_, u)| u.clone()).collect();
            GlobalPolicy::from_uplinks(
                &uplinks,
                file.num_classes,
                cfg.scope.gamma,
                cfg.scope.epsilon,
            )?
        }
    };

    let mut lines = String::new();
    let mut summaries = Vec::new();
    let mut kept = 0;
    for (k, recs) in &clients {
        let labels: BTreeMap<u64, u32> =
            recs.iter().map(|r| (r.sample_id, r.class_label)).collect();
        let decision = select_coreset(*k, &labels, &phase_one[k].0, &policy, &cfg.scope.select)?;
        kept += decision.kept.len();
        let mut buf = Vec::new();
        decision.write_dispositions(&mut buf)?;
        lines.push_str(&String::from_utf8_lossy(&buf));
        summaries.push(ClientSummary {
            client_id: *k,
            target_classes: decision.target_classes.clone(),
            classes: decision.class_summary(&labels),
        });
    }
    fs::write(out, lines)?;
    if let Some(path) = report {
        io::write_json(path, &summaries)?;
    }
    println!("kept {kept} of {} records", file.records.len());
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &Path, dispositions: Option<&Path>) -> Result<()> {
    let sim = federation::simulate(cfg)?;
    io::write_json(out, &sim.report)?;
    if let Some(path) = dispositions {
        let mut buf = Vec::new();
        for d in sim.run.decisions.values() {
            d.write_dispositions(&mut buf)?;
        }
        fs::write(path, buf)?;
    }
    let r = &sim.report;
    println!(
        "coreset {} of {} samples; final accuracy full {:.4} coreset {:.4} random {:.4}",
        r.coreset_size,
        r.full_size,
        r.accuracy.full.last().unwrap_or(&0.0),
        r.accuracy.coreset.last().unwrap_or(&0.0),
        r.accuracy.random.last().unwrap_or(&0.0),
    );
    Ok(())
}

fn sweep(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let betas = beta_sweep(cfg, &federation::BETA_GRID)?;
    io::write_csv(&out_dir.join("beta_sweep.csv"), &betas)?;
    let prunes = prune_sweep(cfg, &federation::IR_GRID, &federation::PRUNE_GRID)?;
    io::write_csv(&out_dir.join("prune_sweep.csv"), &prunes)?;
    println!(
        "wrote {} beta rows and {} p_f rows to {}",
        betas.len(),
        prunes.len(),
        out_dir.display()
    );
    Ok(())
}
