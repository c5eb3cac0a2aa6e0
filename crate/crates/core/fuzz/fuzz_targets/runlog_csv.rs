#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = zocertify::zo::RunLog::parse_csv(data) {
        let _ = log.to_csv();
    }
});
