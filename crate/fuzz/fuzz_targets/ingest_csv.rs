#![no_main]

use libfuzzer_sys::fuzz_target;
use sinkflow::dataio::{build_marginals_and_plans, ingest, write_timeline};

fuzz_target!(|data: &[u8]| {
    let Ok(tl) = ingest(data, None) else { return };
    // Anything accepted must round-trip and yield consistent plans.
    let mut out = Vec::new();
    write_timeline(&tl, &mut out).unwrap();
    assert_eq!(ingest(out.as_slice(), Some(tl.k)).unwrap(), tl);
    let series = build_marginals_and_plans(&tl).unwrap();
    series.validate().unwrap();
});
