#![no_main]

use afrda_core::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // anything that decodes must re-encode to the same bytes
        let bytes = ckpt.encode().expect("decoded checkpoint encodes");
        assert_eq!(bytes, data);
    }
});
