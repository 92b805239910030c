#![no_main]

use blac_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_toml_str(text, &[]) else { return };
    // a valid config must survive its own snapshot
    let snapshot = cfg.to_toml_string().expect("valid config serialises");
    let again = ExperimentConfig::from_toml_str(&snapshot, &[]).expect("snapshot parses");
    assert_eq!(again.to_toml_string().unwrap(), snapshot);
});
