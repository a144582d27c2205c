#![no_main]

use cptr_core::data::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("written checkpoint parses");
        assert_eq!(again.to_bytes(), bytes);
    }
});
