//! Shared helpers for the benchmarks.

use smac_core::{parse_blueprint, Blueprint};

pub fn fixture(name: &str) -> Blueprint {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(format!("{name}.txt"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_blueprint(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
