#![no_main]

use flow_tdvp::flow::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&c.model, c.t).expect("decoded model re-encodes");
        let again = checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.model.params().values().len(), c.model.params().values().len());
        assert_eq!(again.t.to_bits(), c.t.to_bits());
    }
});
