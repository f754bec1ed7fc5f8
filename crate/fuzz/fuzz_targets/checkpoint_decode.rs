#![no_main]
use libfuzzer_sys::fuzz_target;
use sane_core::checkpoint::Checkpoint;

// Manifest text, a NUL byte, then the payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(manifest) = std::str::from_utf8(&data[..split]) else { return };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(c) = Checkpoint::decode(manifest, payload) {
        let (m, p) = c.encode();
        let again = Checkpoint::decode(&m, &p).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), (m, p));
    }
});
