#![no_main]

use blac_core::mlp::Mlp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = Mlp::from_bytes(data) {
        assert_eq!(net.to_bytes(), data);
        let x = vec![0.5; net.input_dim()];
        let _ = net.apply(&x);
    }
});
