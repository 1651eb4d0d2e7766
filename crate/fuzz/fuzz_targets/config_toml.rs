#![no_main]

use libfuzzer_sys::fuzz_target;
use scribe_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        let _ = cfg.validate();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }
    let mut layered = RunConfig::toy();
    let _ = layered.layer_toml(text);
});
