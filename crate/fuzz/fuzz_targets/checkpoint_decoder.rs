#![no_main]

use libfuzzer_sys::fuzz_target;
use spannorm::harness::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // The config text may be non-canonical, so compare canonical forms.
        let canonical = ckpt.encode();
        let again = Checkpoint::decode(&canonical).expect("canonical encoding decodes");
        assert_eq!(again.encode(), canonical);
    }
});
