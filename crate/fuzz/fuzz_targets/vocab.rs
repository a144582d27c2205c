#![no_main]

use cptr_core::data::vocab::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::from_text(text) {
        let again = Vocabulary::from_text(&v.to_text()).expect("written vocabulary parses");
        assert_eq!(again, v);
        let ids = v.encode("a red zebra");
        let _ = v.decode(&ids);
    }
});
