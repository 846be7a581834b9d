#![no_main]

use libfuzzer_sys::fuzz_target;
use skatescore::train::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = decode_checkpoint(data) {
        // Compare bytes rather than values so NaN payloads still round-trip.
        if let Ok(bytes) = encode_checkpoint(&c) {
            let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
            assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
        }
    }
});
