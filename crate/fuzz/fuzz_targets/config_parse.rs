#![no_main]

use afrda_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = RunConfig::parse(text) {
        let again = RunConfig::parse(&config.serialize()).expect("serialized config parses");
        assert_eq!(again, config);
    }
});
