#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use scribe_core::dataset::{DatasetManifest, DEFAULT_MAX_WORD_LENGTH};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let source = Path::new("data/manifest.tsv");
    if let Ok(m) = DatasetManifest::parse(text, source, None, DEFAULT_MAX_WORD_LENGTH) {
        // Whatever parsed must survive a write and a re-read unchanged.
        let again = DatasetManifest::parse(&m.to_text(Path::new("data")), source, Some(&m.charset), DEFAULT_MAX_WORD_LENGTH)
            .expect("serialized manifest parses");
        assert_eq!(again.entries, m.entries);
    }
});
