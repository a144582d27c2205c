#![no_main]

use cptr_core::data::toy;
use cptr_core::metrics::tokenize;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if toy::parses(text) {
        assert_eq!(tokenize(text).join(" "), text);
    }
});
