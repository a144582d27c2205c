#![no_main]

use cptr_core::data::attn_dump::AttentionDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = AttentionDump::from_bytes(data) {
        let bytes = dump.to_bytes();
        let again = AttentionDump::from_bytes(&bytes).expect("written dump parses");
        assert_eq!(again.to_bytes(), bytes);
    }
});
