#![no_main]

use libfuzzer_sys::fuzz_target;
use skatescore::train::parse_train_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = parse_train_config(text) {
        let _ = c.validate();
    }
});
