#![no_main]
use libfuzzer_sys::fuzz_target;
use multichart::checkpoint::{decode_optimizer, encode_optimizer};

fuzz_target!(|data: &[u8]| {
    if let Ok(opt) = decode_optimizer(data) {
        assert_eq!(encode_optimizer(&opt), data);
    }
});
