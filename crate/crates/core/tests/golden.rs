//! Golden files. Regenerate with `SCOPE_BLESS=1 cargo test --test golden`.

use std::path::PathBuf;

use scope_core::federation::{simulate, RunConfig};
use scope_core::io::{load_config, render_config, to_json};

fn manifest(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn compare_or_bless(rel: &str, actual: &str) {
    let path = manifest(rel);
    if std::env::var_os("SCOPE_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert!(
        expected == actual,
        "{} is stale; rerun with SCOPE_BLESS=1",
        path.display()
    );
}

#[test]
fn shipped_config_is_the_default() {
    compare_or_bless(
        "configs/default.conf",
        &render_config(&RunConfig::default()),
    );
    assert_eq!(
        load_config(&manifest("configs/default.conf")).unwrap(),
        RunConfig::default()
    );
}

#[test]
fn default_report_matches_golden() {
    let report = simulate(&RunConfig::default()).unwrap().report;
    compare_or_bless(
        "tests/fixtures/default_report.json",
        &to_json(&report).unwrap(),
    );
}
