#![no_main]

use libfuzzer_sys::fuzz_target;
use spannorm::harness::{ConfigDoc, TrainConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = ConfigDoc::parse(text) {
        // Rendering a parsed document and parsing it again is lossless.
        let again = ConfigDoc::parse(&doc.to_string()).expect("rendered document parses");
        assert_eq!(again, doc);
    }
    if let Ok(config) = TrainConfig::parse(text) {
        if config.validate().is_ok() {
            let again = TrainConfig::from_doc(&config.to_doc()).expect("rendered config parses");
            assert_eq!(again, config);
        }
    }
});
