#![no_main]

use blac_core::experiment::{read_metrics_csv, read_summary_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_metrics_csv(data);
    let _ = read_summary_csv(data);
});
