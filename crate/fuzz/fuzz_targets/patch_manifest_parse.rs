#![no_main]
//! Fuzz the patch-set CSV manifest parser.

use libfuzzer_sys::fuzz_target;
use mitoxplain::patch::parse_patch_manifest;

fuzz_target!(|data: &[u8]| {
    let _ = parse_patch_manifest(data);
});
