#![no_main]
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use multichart::checkpoint::{decode_params, encode_params, load_model};
use multichart::config::ExperimentConfig;

static CONFIG: OnceLock<ExperimentConfig> = OnceLock::new();

fuzz_target!(|data: &[u8]| {
    let config = CONFIG.get_or_init(|| ExperimentConfig::from_toml(include_str!("../../crates/core/tests/fixtures/tiny.toml")).unwrap());
    if let Ok((hash, params)) = decode_params(data) {
        assert_eq!(encode_params(&params, &hash), data);
    }
    let _ = load_model(config, data);
});
