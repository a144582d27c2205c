#![no_main]

use cptr_core::data::ppm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ppm::parse(data) {
        let again = ppm::parse(&ppm::write(&img)).expect("written PPM parses");
        assert_eq!(again, img);
    }
});
