#![no_main]

use cadence_core::policy::PosteriorStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(store) = PosteriorStore::from_json(data) {
        let again = PosteriorStore::from_json(&store.to_json()).unwrap();
        assert_eq!(again, store);
    }
});
