#![no_main]
//! Fuzz the TIFF stack reader against arbitrary bytes. Decoding must fail
//! cleanly or produce a validated stack; it must never panic.

use libfuzzer_sys::fuzz_target;
use mitoxplain::stack::{ChannelMap, LoadMode};
use mitoxplain::tiffio::read_stack_from;
use std::io::Cursor;

fuzz_target!(|data: &[u8]| {
    let map = ChannelMap::canonical();
    for mode in [LoadMode::Strict, LoadMode::Permissive] {
        if let Ok(stack) = read_stack_from(Cursor::new(data), &map, mode, "fuzz") {
            // decoded stacks satisfy their structural invariants
            let (h, w) = stack.dims();
            for (_, grid) in stack.channels() {
                assert_eq!(grid.dim(), (h, w));
            }
        }
    }
});
