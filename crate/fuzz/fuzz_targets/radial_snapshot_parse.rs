#![no_main]

use flow_tdvp::reference::RadialProfile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(profile) = RadialProfile::parse_snapshot(text) {
        let again = RadialProfile::parse_snapshot(&profile.to_snapshot()).expect("snapshot re-parses");
        assert_eq!(again, profile);
    }
});
