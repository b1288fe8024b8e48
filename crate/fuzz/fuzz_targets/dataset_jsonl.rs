//! Dataset JSONL decoder. Anything that parses must survive a re-encode.
//!
//! ```bash
//! cargo fuzz run dataset_jsonl
//! ```

#![no_main]

use icq_core::OfflineDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = OfflineDataset::from_jsonl(text) {
        let again =
            OfflineDataset::from_jsonl(&ds.to_jsonl()).expect("re-encoded dataset must parse");
        assert_eq!(ds, again);
    }
});
