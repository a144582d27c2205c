#![no_main]

use cptr_cli::config::{Preset, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for preset in [Preset::Full, Preset::Toy] {
        if let Ok((cfg, _)) = RunConfig::from_json(preset, text) {
            let (again, _) = RunConfig::from_json(preset, &cfg.to_json()).expect("written config parses");
            assert_eq!(again.to_json(), cfg.to_json());
        }
    }
});
