#![no_main]

use libfuzzer_sys::fuzz_target;
use skatescore::data::{encode_label, parse_label};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(label) = parse_label(text) {
        let _ = label.validate(288, 22);
        if label.pcs.is_finite() && label.segments.iter().all(|s| s.start.is_finite() && s.end.is_finite() && s.score.is_finite()) {
            assert_eq!(parse_label(&encode_label(&label)).unwrap(), label);
        }
    }
});
