#![no_main]

use libfuzzer_sys::fuzz_target;
use zocertify::numerics::Checkpoint;

// Anything that decodes must re-encode to something that decodes the same.
fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), ck.encode());
    }
});
