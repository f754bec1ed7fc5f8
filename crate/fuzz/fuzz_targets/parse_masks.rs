#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: (u8, &str)| {
    let (n, text) = data;
    let _ = sane_core::graph::parse_masks(text, n as usize);
});
