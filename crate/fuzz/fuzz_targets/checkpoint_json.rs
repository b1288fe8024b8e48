#![no_main]

use icq_core::learners::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ckpt) = Checkpoint::from_json(text) {
        let again =
            Checkpoint::from_json(&ckpt.to_json()).expect("re-encoded checkpoint must parse");
        assert_eq!(ckpt, again);
    }
});
