#![no_main]

use kanet::adapter::parse_class_ids;
use libfuzzer_sys::fuzz_target;

// Sidecar id lists must parse without panicking and never contain
// duplicates on success.
fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(ids) = parse_class_ids(&text) {
        let unique: std::collections::HashSet<u32> = ids.iter().copied().collect();
        assert_eq!(unique.len(), ids.len(), "accepted duplicate class ids");
    }
});
