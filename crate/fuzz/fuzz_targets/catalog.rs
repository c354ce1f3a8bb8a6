#![no_main]

use cadence_core::synthesis::MessageCatalog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = MessageCatalog::from_toml_str(data);
    let _ = MessageCatalog::from_json_str(data);
});
