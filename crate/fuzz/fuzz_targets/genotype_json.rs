#![no_main]
use libfuzzer_sys::fuzz_target;
use sane_core::search::Genotype;

fuzz_target!(|text: &str| {
    if let Ok((g, prov)) = Genotype::from_json(text) {
        let again = Genotype::from_json(&g.to_json(prov.as_ref())).expect("re-encoded genotype parses");
        assert_eq!(again.0, g);
    }
});
