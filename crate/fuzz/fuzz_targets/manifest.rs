#![no_main]

use blac_core::experiment::CheckpointManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = CheckpointManifest::parse(text) {
        assert!(m.log_alpha.is_finite());
        assert!(m.lagrangian.zeta >= 0.0);
    }
});
