#![no_main]
//! Fuzz the run-configuration TOML parser and validator.

use libfuzzer_sys::fuzz_target;
use mitoxplain::run::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = RunConfig::from_toml_str(text) {
            // parsed configs re-serialise and re-validate
            if let Ok(round) = config.to_toml_string() {
                let _ = RunConfig::from_toml_str(&round);
            }
        }
    }
});
