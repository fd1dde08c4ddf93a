#![no_main]

use libfuzzer_sys::fuzz_target;
use spannorm::harness::ActivationDump;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = ActivationDump::decode(data) {
        assert_eq!(dump.encode(), data);
    }
});
