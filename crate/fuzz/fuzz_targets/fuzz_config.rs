#![no_main]
use blockbp::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = blockbp::config::parse_kv(text);
    if let Ok(cfg) = ExperimentConfig::from_config_text(text) {
        // Accepted configs round-trip losslessly through the kv format.
        let again = ExperimentConfig::from_config_text(&cfg.to_config_text()).unwrap();
        assert_eq!(cfg, again);
    }
});
