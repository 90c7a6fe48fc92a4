#![no_main]

use flow_tdvp::experiment::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::resolve(Some(text), &[]) {
        let echo = config.canonical_json();
        let again = RunConfig::resolve(Some(&echo), &[]).expect("canonical echo re-parses");
        assert_eq!(again.canonical_json(), echo);
    }
});
