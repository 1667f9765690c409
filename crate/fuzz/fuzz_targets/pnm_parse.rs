#![no_main]

use afrda_core::pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pnm::parse(data) {
        let again = pnm::parse(&img.encode()).expect("canonical encoding parses");
        assert_eq!(again, img);
    }
});
