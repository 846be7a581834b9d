#![no_main]

use libfuzzer_sys::fuzz_target;
use skatescore::data::{decode_features, encode_features};

fuzz_target!(|data: &[u8]| {
    if let Ok(x) = decode_features(data) {
        // Anything accepted must survive a re-encode bit for bit.
        assert_eq!(encode_features(&x), data);
    }
});
