//! Shared helpers for the benchmark targets.

use std::path::{Path, PathBuf};

use bitfuzz_core::harness::FuzzerSpec;
use bitfuzz_core::sim::DeviceConfig;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .join("fixtures")
}

pub fn load_spec(name: &str) -> FuzzerSpec {
    FuzzerSpec::load(fixtures_dir().join("specs").join(name)).expect("spec fixture")
}

pub fn load_device(name: &str) -> DeviceConfig {
    DeviceConfig::load(fixtures_dir().join("devices").join(name)).expect("device fixture")
}
