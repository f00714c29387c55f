//! Sweep CSVs for the builtin circuits, compared byte-for-byte against files
//! in tests/golden. Regenerate with `PATCHBENCH_BLESS=1 cargo test --test golden`.

use std::path::PathBuf;

use patchbench_core::circuits::ToyCircuitKind;
use patchbench_core::metrics::MetricKind;
use patchbench_core::patch::{sweep, Direction, Granularity, SweepSpec, Technique};
use patchbench_core::runner::records_to_csv;

fn check(kind: ToyCircuitKind, direction: Direction, granularity: Granularity) {
    let (model, truth) = kind.build().unwrap();
    let spec = SweepSpec {
        pair: truth.pair(),
        direction,
        technique: Technique::Patch,
        granularity,
        metrics: vec![MetricKind::LogitDiff, MetricKind::Prob, MetricKind::KlDiv],
    };
    let csv = records_to_csv(&sweep(&model, &spec).unwrap()).unwrap();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{kind}_{}_{}.csv", granularity.name(), direction.name()));
    if std::env::var_os("PATCHBENCH_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &csv).unwrap();
    }
    let golden = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(csv == golden, "{} no longer matches", path.display());
}

#[test]
fn and_component_noise() {
    check(ToyCircuitKind::AndGate, Direction::Noise, Granularity::Component);
}

#[test]
fn or_component_denoise() {
    check(ToyCircuitKind::OrGate, Direction::Denoise, Granularity::Component);
}

#[test]
fn nobel_head_denoise() {
    check(ToyCircuitKind::Nobel, Direction::Denoise, Granularity::Head);
}

#[test]
fn nobel_resid_noise() {
    check(ToyCircuitKind::Nobel, Direction::Noise, Granularity::Resid);
}

#[test]
fn backup_head_noise() {
    check(ToyCircuitKind::Backup, Direction::Noise, Granularity::Head);
}

#[test]
fn negative_head_noise() {
    check(ToyCircuitKind::NegativeHead, Direction::Noise, Granularity::Head);
}
