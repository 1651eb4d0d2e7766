#![no_main]

use libfuzzer_sys::fuzz_target;
use scribe_core::dataset::{canonicalize_image, is_canonical};
use scribe_core::raster::GrayImage;

fuzz_target!(|data: &[u8]| {
    let Ok(img) = GrayImage::decode(data) else {
        return;
    };
    assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    if let Ok(c) = canonicalize_image(&img) {
        assert!(is_canonical(&c));
        assert!(c.is_finite());
    }
});
