#![no_main]

use libfuzzer_sys::fuzz_target;
use skatescore::data::{encode_manifest, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_manifest(text) {
        assert_eq!(parse_manifest(&encode_manifest(&m)).unwrap(), m);
    }
});
