#![no_main]

use libfuzzer_sys::fuzz_target;

use delorean::corpus::RuleTable;
use delorean::vocab::Vocab;
use std::sync::OnceLock;

static VOCAB: OnceLock<Vocab> = OnceLock::new();

fuzz_target!(|data: &[u8]| {
    let vocab = VOCAB.get_or_init(|| RuleTable::standard().vocab());
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(seq) = vocab.encode(text) {
            // Round-trip property: decode of a successful encode re-encodes
            // to the same ids.
            let back = vocab.encode(&vocab.decode(&seq)).unwrap();
            assert_eq!(back.ids, seq.ids);
        }
    }
});
