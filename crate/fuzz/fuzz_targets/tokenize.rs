#![no_main]

use libfuzzer_sys::fuzz_target;
use scribe_core::style_ops::segment_long_word;
use scribe_core::text::{detokenize, tokenize};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let max_len = 1 + data.first().map_or(0, |b| *b as usize % 32);
    if let Ok(t) = tokenize(text, max_len) {
        assert_eq!(t.max_len(), max_len);
        assert_eq!(detokenize(&t), text);
    }
    if let Ok(parts) = segment_long_word(text, max_len) {
        assert_eq!(parts.concat(), text);
        assert!(parts.iter().all(|p| p.chars().count() <= max_len));
    }
});
