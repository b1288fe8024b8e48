#![no_main]

use std::path::Path;

use icq_lab::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let origin = Path::new("fuzz.json");
    if let Ok(config) = ExperimentConfig::from_json(text, origin) {
        // validation may reject, but must not panic
        let _ = config.validate();
        let again = ExperimentConfig::from_json(&config.to_json(), origin)
            .expect("re-encoded config must parse");
        assert_eq!(config, again);
    }
});
