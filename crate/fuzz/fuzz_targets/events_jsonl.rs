#![no_main]

use cadence_core::event_model::ingest_events;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ingested) = ingest_events(data) {
        for (user, stream) in &ingested.streams {
            assert_eq!(stream.user_id(), user);
            assert!(stream.records().windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }
});
