#![no_main]

use cadence_core::duration::Duration;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(d) = data.parse::<Duration>() {
        assert_eq!(d.to_string().parse::<Duration>().unwrap(), d);
    }
});
