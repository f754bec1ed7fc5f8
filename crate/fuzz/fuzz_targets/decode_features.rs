#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: (u8, u8, &[u8])| {
    let (n, d, bytes) = data;
    let _ = sane_core::graph::decode_features(bytes, n as usize, d as usize);
});
