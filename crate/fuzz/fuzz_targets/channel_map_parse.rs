#![no_main]
//! Fuzz the channel-map TOML parser.

use libfuzzer_sys::fuzz_target;
use mitoxplain::stack::{ChannelMap, LoadMode};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(map) = ChannelMap::from_toml_str(text) {
            let _ = map.name_for_page(0, LoadMode::Permissive);
            let _ = map.to_toml_string();
        }
    }
});
