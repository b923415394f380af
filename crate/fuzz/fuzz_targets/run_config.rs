#![no_main]

use kanet::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// Config text comes from users; parsing and validating must never panic.
fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(cfg) = RunConfig::parse(&text) {
        let _ = cfg.validate();
        let _ = cfg.encoder_config();
        let _ = cfg.ipel_config();
        let _ = cfg.split_config();
        let _ = cfg.synthetic_config();
    }
});
