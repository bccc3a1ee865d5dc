#![no_main]
use libfuzzer_sys::fuzz_target;
use multichart::datasets::{decode_dataset_bin, encode_dataset_bin};

fuzz_target!(|data: &[u8]| {
    if let Ok((train, val)) = decode_dataset_bin(data) {
        assert_eq!(encode_dataset_bin(&train, &val).unwrap(), data);
    }
});
