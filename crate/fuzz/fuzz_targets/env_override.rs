#![no_main]

use blac_core::config::{env_overrides, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

// Input is `NAME=value` lines, as they would appear in the environment.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vars = text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string()));
    let Ok(overrides) = env_overrides(vars) else { return };
    let _ = ExperimentConfig::default().with_overrides(&overrides);
});
