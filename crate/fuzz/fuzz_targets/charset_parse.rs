#![no_main]

use libfuzzer_sys::fuzz_target;
use scribe_core::dataset::Charset;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cs) = Charset::parse(text) {
            assert_eq!(Charset::parse(&cs.to_file_text()).unwrap(), cs);
            for (i, &c) in cs.chars().iter().enumerate() {
                assert_eq!(cs.class_of(c), Some(i + 1));
            }
        }
    }
});
