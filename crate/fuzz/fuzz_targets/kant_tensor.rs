#![no_main]

use kanet::data::{tensor_from_bytes, write_tensor};
use libfuzzer_sys::fuzz_target;

// Decoding arbitrary bytes must never panic, and any accepted record must
// re-encode to exactly the input bytes (decode/encode round trip).
fuzz_target!(|data: &[u8]| {
    if let Ok(t) = tensor_from_bytes::<f32>(data) {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf, data, "f32 round trip must be bitwise");
    }
    if let Ok(t) = tensor_from_bytes::<f64>(data) {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf, data, "f64 round trip must be bitwise");
    }
});
