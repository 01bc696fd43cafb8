#![no_main]

use libfuzzer_sys::fuzz_target;
use sinkflow_cli::SankeyDocument;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = SankeyDocument::from_json(text) {
        let _ = doc.to_svg();
    }
});
