#![no_main]
//! Fuzz the relevance-map metadata parser.

use libfuzzer_sys::fuzz_target;
use mitoxplain::explain::parse_relevance_meta;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_relevance_meta(text);
    }
});
