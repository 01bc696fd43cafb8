#![no_main]

use libfuzzer_sys::fuzz_target;
use sinkflow::dataio::{generate_synthetic, SyntheticSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = SyntheticSpec::from_json(text) else {
        return;
    };
    // Keep generation cheap; parsing and validation are the targets.
    if spec.n.saturating_mul(spec.t) <= 20_000 {
        let _ = generate_synthetic(&spec);
    }
});
