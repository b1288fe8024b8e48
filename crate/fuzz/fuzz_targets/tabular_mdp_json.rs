#![no_main]

use icq_core::TabularMdp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(mdp) = serde_json::from_slice::<TabularMdp>(data) {
        let text = serde_json::to_string(&mdp).unwrap();
        let again: TabularMdp = serde_json::from_str(&text).expect("re-encoded mdp must parse");
        assert_eq!(mdp, again);
    }
});
