#![no_main]

use cadence_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    for cfg in [
        ExperimentConfig::from_toml_str(data),
        ExperimentConfig::from_json_str(data),
    ]
    .into_iter()
    .flatten()
    {
        let _ = cfg.validate();
    }
});
