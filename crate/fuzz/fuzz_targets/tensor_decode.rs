#![no_main]
//! Fuzz the binary tensor container decoder.

use libfuzzer_sys::fuzz_target;
use mitoxplain::tensorfile::read_from;
use std::io::Cursor;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensor) = read_from(Cursor::new(data)) {
        // the advertised shape matches the decoded element count
        let count: usize = tensor.shape().iter().product();
        match tensor {
            mitoxplain::tensorfile::Tensor::F32(a) => assert_eq!(a.len(), count),
            mitoxplain::tensorfile::Tensor::F64(a) => assert_eq!(a.len(), count),
        }
    }
});
