#![no_main]

use libfuzzer_sys::fuzz_target;
use sinkflow::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ckpt) = Checkpoint::from_json(text) {
        let _ = ckpt.params();
    }
});
