#![no_main]
//! Fuzz the run-manifest TOML parser.

use libfuzzer_sys::fuzz_target;
use mitoxplain::run::RunManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = RunManifest::from_toml_str(text) {
            let _ = manifest.stage("train");
        }
    }
});
