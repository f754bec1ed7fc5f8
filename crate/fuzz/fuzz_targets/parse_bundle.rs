#![no_main]
use libfuzzer_sys::fuzz_target;

// Five bundle files separated by NUL bytes, in meta, edges, features,
// labels, masks order.
fuzz_target!(|data: &[u8]| {
    let mut parts = data.splitn(5, |&b| b == 0);
    let (Some(meta), Some(edges), Some(features), Some(labels), Some(masks)) =
        (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return;
    };
    let text = |b: &[u8]| String::from_utf8_lossy(b).into_owned();
    // keep allocations bounded: the meta header sizes every buffer
    if let Ok(m) = sane_core::graph::parse_meta(&text(meta)) {
        if m.num_nodes.saturating_mul(m.feat_dim.max(1)) > 1 << 16 || m.num_classes > 1 << 10 {
            return;
        }
    }
    let _ = sane_core::graph::parse_bundle(&text(meta), &text(edges), features, &text(labels), &text(masks));
});
