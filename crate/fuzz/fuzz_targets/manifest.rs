#![no_main]

use kanet::data::parse_manifest;
use libfuzzer_sys::fuzz_target;

// Manifest parsing is pure; parsing twice must agree.
fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let first = parse_manifest(&text);
    let second = parse_manifest(&text);
    match (first, second) {
        (Ok(a), Ok(b)) => assert_eq!(a, b),
        (Err(_), Err(_)) => {}
        _ => panic!("manifest parse is not deterministic"),
    }
});
