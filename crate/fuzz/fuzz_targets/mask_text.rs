#![no_main]

use libfuzzer_sys::fuzz_target;
use omnimoe::maskgen::MaskSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mask) = MaskSpec::from_text(text) {
        if mask.len() <= 256 {
            assert_eq!(MaskSpec::compact(&mask.densify()).unwrap(), mask);
        }
        assert_eq!(MaskSpec::from_text(&mask.to_text()).unwrap(), mask);
    }
});
