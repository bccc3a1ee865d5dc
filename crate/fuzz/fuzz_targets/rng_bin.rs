#![no_main]
use libfuzzer_sys::fuzz_target;
use multichart::checkpoint::{decode_rng, encode_rng};

fuzz_target!(|data: &[u8]| {
    // Word positions wrap, so compare generator states rather than bytes.
    if let Ok(rng) = decode_rng(data) {
        assert_eq!(decode_rng(&encode_rng(&rng)).unwrap(), rng);
    }
});
