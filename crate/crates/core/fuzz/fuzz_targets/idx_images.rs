#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = zocertify::data::parse_idx_images(data) {
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
