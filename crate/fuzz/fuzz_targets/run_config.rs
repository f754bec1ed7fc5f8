#![no_main]
use libfuzzer_sys::fuzz_target;
use sane_cli::RunConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::parse(text, &[]) {
        let resolved = cfg.resolved_json();
        RunConfig::parse(&resolved, &[]).expect("resolved config parses");
    }
});
