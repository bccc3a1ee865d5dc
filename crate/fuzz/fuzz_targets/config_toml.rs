#![no_main]
use libfuzzer_sys::fuzz_target;
use multichart::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = ExperimentConfig::from_toml(text) else { return };
    let dumped = config.to_toml().expect("valid config serializes");
    let again = ExperimentConfig::from_toml(&dumped).expect("own output must parse");
    assert_eq!(config, again);
    assert_eq!(config.model.hash(), again.model.hash());
});
