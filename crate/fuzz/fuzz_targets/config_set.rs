#![no_main]

use libfuzzer_sys::fuzz_target;
use scribe_core::config::RunConfig;

// `--set key=value` overrides arrive straight from the command line.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut cfg = RunConfig::default();
        if cfg.set(text).is_ok() {
            let _ = cfg.validate();
            let _ = cfg.hash();
        }
    }
});
