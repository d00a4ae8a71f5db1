//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! Every key and its default is listed in [`KEYS`].

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, ScopeError};
use crate::federation::RunConfig;

/// `(key, description)` for every accepted key.
pub const KEYS: &[(&str, &str)] = &[
    (
        "p_l",
        "fraction of each client's samples pruned as anomalies, [0, 1)",
    ),
    (
        "p_f",
        "fraction of each target class pruned as redundant, [0, 1)",
    ),
    ("beta", "relative targeting margin, [0, 1]"),
    ("gamma", "rarity power-law exponent, >= 0"),
    (
        "epsilon",
        "stability constant of the rarity weight and targeting ratio, >= 0",
    ),
    ("num_clients", "number of clients K, >= 1"),
    ("num_classes", "number of classes M, >= 2"),
    (
        "dirichlet_alpha",
        "Dirichlet concentration of the label split, > 0",
    ),
    ("imbalance_ratio", "head/tail global class-size ratio, >= 1"),
    ("n_max", "samples in the head class, >= imbalance_ratio"),
    (
        "seed",
        "master seed for partitioning, synthesis and training",
    ),
    ("dim", "embedding dimension D, >= 2"),
    (
        "separation_deg",
        "minimum pairwise prototype angle in degrees",
    ),
    (
        "tangent_sigma",
        "per-coordinate tangent noise of synthetic samples",
    ),
    (
        "noise_fraction",
        "fraction of each client's samples drawn from a wrong class, [0, 1)",
    ),
    ("rounds", "FedAvg rounds of the linear probe"),
    ("local_epochs", "local epochs per round, >= 1"),
    ("lr", "peak learning rate (cosine decay), > 0"),
    ("batch_size", "local mini-batch size, >= 1"),
    (
        "participation",
        "fraction of clients sampled per round, (0, 1]",
    ),
    ("test_per_class", "balanced held-out samples per class"),
    (
        "scalars_per_class",
        "scalars per (client, class) in the byte estimate",
    ),
    ("bytes_per_scalar", "bytes per scalar in the byte estimate"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| ScopeError::Config(format!("{key}: cannot parse {value:?}")))
}

/// Sets one key on `config`. Range checks happen in [`RunConfig::validate`].
pub fn apply(config: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let c = config;
    match key {
        "p_l" => c.scope.select.p_l = parse(key, value)?,
        "p_f" => c.scope.select.p_f = parse(key, value)?,
        "beta" => c.scope.select.beta = parse(key, value)?,
        "gamma" => c.scope.gamma = parse(key, value)?,
        "epsilon" => c.scope.epsilon = parse(key, value)?,
        "num_clients" => c.partition.num_clients = parse(key, value)?,
        "num_classes" => c.partition.num_classes = parse(key, value)?,
        "dirichlet_alpha" => c.partition.dirichlet_alpha = parse(key, value)?,
        "imbalance_ratio" => c.partition.imbalance_ratio = parse(key, value)?,
        "n_max" => c.partition.n_max = parse(key, value)?,
        "seed" => c.partition.seed = parse(key, value)?,
        "dim" => c.dim = parse(key, value)?,
        "separation_deg" => c.separation_deg = parse(key, value)?,
        "tangent_sigma" => c.tangent_sigma = parse(key, value)?,
        "noise_fraction" => c.noise_fraction = parse(key, value)?,
        "rounds" => c.probe.rounds = parse(key, value)?,
        "local_epochs" => c.probe.local_epochs = parse(key, value)?,
        "lr" => c.probe.lr = parse(key, value)?,
        "batch_size" => c.probe.batch_size = parse(key, value)?,
        "participation" => c.probe.participation = parse(key, value)?,
        "test_per_class" => c.test_per_class = parse(key, value)?,
        "scalars_per_class" => c.accounting.scalars_per_class = parse(key, value)?,
        "bytes_per_scalar" => c.accounting.bytes_per_scalar = parse(key, value)?,
        _ => return Err(ScopeError::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Parses config text on top of the defaults, then validates ranges.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ScopeError::Config(format!("line {}: expected key = value", n + 1)))?;
        apply(&mut config, key.trim(), value)
            .map_err(|e| ScopeError::Config(format!("line {}: {}", n + 1, strip(e))))?;
    }
    config.validate()?;
    Ok(config)
}

fn strip(e: ScopeError) -> String {
    match e {
        ScopeError::Config(m) => m,
        other => other.to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Renders every key with its current value, one per line.
pub fn render_config(c: &RunConfig) -> String {
    let values: Vec<String> = vec![
        c.scope.select.p_l.to_string(),
        c.scope.select.p_f.to_string(),
        c.scope.select.beta.to_string(),
        c.scope.gamma.to_string(),
        c.scope.epsilon.to_string(),
        c.partition.num_clients.to_string(),
        c.partition.num_classes.to_string(),
        c.partition.dirichlet_alpha.to_string(),
        c.partition.imbalance_ratio.to_string(),
        c.partition.n_max.to_string(),
        c.partition.seed.to_string(),
        c.dim.to_string(),
        c.separation_deg.to_string(),
        c.tangent_sigma.to_string(),
        c.noise_fraction.to_string(),
        c.probe.rounds.to_string(),
        c.probe.local_epochs.to_string(),
        c.probe.lr.to_string(),
        c.probe.batch_size.to_string(),
        c.probe.participation.to_string(),
        c.test_per_class.to_string(),
        c.accounting.scalars_per_class.to_string(),
        c.accounting.bytes_per_scalar.to_string(),
    ];
    let mut out = String::new();
    for ((key, doc), value) in KEYS.iter().zip(values) {
        let _ = writeln!(out, "# {doc}\n{key} = {value}");
    }
    out
}
