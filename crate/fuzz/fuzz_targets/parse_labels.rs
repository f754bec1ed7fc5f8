#![no_main]
use libfuzzer_sys::fuzz_target;
use sane_core::graph::{parse_labels, BundleMeta};

fuzz_target!(|data: (u8, u8, bool, &str)| {
    let (n, c, multi_label, text) = data;
    let meta = BundleMeta {
        num_nodes: n as usize,
        feat_dim: 1,
        num_classes: c as usize,
        multi_label,
    };
    let _ = parse_labels(text, &meta);
});
