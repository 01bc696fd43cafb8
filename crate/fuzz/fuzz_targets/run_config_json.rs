#![no_main]

use libfuzzer_sys::fuzz_target;
use sinkflow_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = serde_json::from_str::<RunConfig>(text) else {
        return;
    };
    let _ = cfg.sinkhorn();
    let _ = cfg.loss();
    let _ = cfg.loss_mix_grid();
    let echoed = serde_json::to_string(&cfg.echo()).unwrap();
    serde_json::from_str::<RunConfig>(&echoed).unwrap();
});
