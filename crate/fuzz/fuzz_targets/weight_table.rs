#![no_main]

use cadence_core::outcome::EventWeightTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(table) = EventWeightTable::from_json(data) {
        let _ = EventWeightTable::from_json(&table.to_json());
    }
});
