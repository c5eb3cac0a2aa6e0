#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = zocertify::data::parse_idx_labels(data) {
        assert!(labels.len() <= data.len());
    }
});
