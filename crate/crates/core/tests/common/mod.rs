#![allow(dead_code)]

use std::path::PathBuf;

use miw::harness::{RunConfig, SweepConfig};

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn config(name: &str) -> RunConfig {
    RunConfig::load(&configs_dir().join(name)).unwrap()
}

pub fn sweep_config(name: &str) -> SweepConfig {
    SweepConfig::load(&configs_dir().join(name)).unwrap()
}

/// Archived reference numbers.
pub fn fixtures() -> serde_json::Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
