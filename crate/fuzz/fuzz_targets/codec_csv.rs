#![no_main]

use libfuzzer_sys::fuzz_target;
use omnimoe::audio::{frames_from_csv, frames_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(frames) = frames_from_csv(text, None) {
        assert_eq!(frames_from_csv(&frames_to_csv(&frames), None).unwrap(), frames);
    }
});
