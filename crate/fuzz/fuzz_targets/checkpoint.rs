#![no_main]

use kanet::adapter::FusionParams;
use kanet::data::read_tensor_stream;
use libfuzzer_sys::fuzz_target;

// Checkpoints are concatenated tensor records; loading one must reject
// malformed streams without panicking.
fuzz_target!(|data: &[u8]| {
    let _ = read_tensor_stream::<f32>(data);
    let _ = FusionParams::<f32>::from_bytes(data, 8, 2);
    let _ = FusionParams::<f64>::from_bytes(data, 16, 4);
});
