#![no_main]

use libfuzzer_sys::fuzz_target;
use lizard::pipeline::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for parsed in [RunConfig::from_toml(text), RunConfig::from_json(text)] {
        let Ok(cfg) = parsed else { continue };
        if cfg.validate().is_ok() {
            // valid configs survive the snapshot used by run directories
            let back = RunConfig::from_json(&cfg.snapshot().expect("snapshot")).expect("snapshot parses");
            assert_eq!(back.snapshot().unwrap(), cfg.snapshot().unwrap());
        }
    }
});
