#![no_main]

use libfuzzer_sys::fuzz_target;
use sinkflow::FlowSeries;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(series) = FlowSeries::from_json(text) {
        let again = serde_json::to_string(&series).unwrap();
        assert_eq!(FlowSeries::from_json(&again).unwrap(), series);
    }
});
