#![no_main]

use libfuzzer_sys::fuzz_target;
use omnimoe::harness::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::parse(text) {
        if config.validate().is_ok() {
            assert_eq!(RunConfig::parse(&config.to_toml()).unwrap(), config);
        }
    }
});
