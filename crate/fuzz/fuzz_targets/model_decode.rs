#![no_main]
//! Fuzz the model weights/architecture decoder.

use libfuzzer_sys::fuzz_target;
use mitoxplain::nn::decode_model_bytes;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_model_bytes(data) {
        // decoded models expose a consistent parameter walk
        let _ = model.param_count();
        let _ = model.checksum();
    }
});
