#![no_main]

use libfuzzer_sys::fuzz_target;
use omnimoe::vision::{codes_from_hex, codes_to_hex};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(frames) = codes_from_hex(text) {
        assert_eq!(codes_from_hex(&codes_to_hex(&frames)).unwrap(), frames);
    }
});
