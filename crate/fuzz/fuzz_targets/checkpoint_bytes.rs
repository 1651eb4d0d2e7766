#![no_main]

use libfuzzer_sys::fuzz_target;
use scribe_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data, None) {
        let bytes = ck.to_bytes().expect("loaded checkpoint serializes");
        Checkpoint::from_bytes(&bytes, None).expect("re-serialized checkpoint loads");
    }
});
