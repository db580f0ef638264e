#![no_main]

use libfuzzer_sys::fuzz_target;
use omnimoe::elastic::SubModelSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = SubModelSpec::from_json(text) {
        let back = serde_json::to_string(&spec).unwrap();
        assert_eq!(SubModelSpec::from_json(&back).unwrap(), spec);
    }
});
