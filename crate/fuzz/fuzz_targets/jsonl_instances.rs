#![no_main]

use libfuzzer_sys::fuzz_target;

// Task-instance JSONL reader must never panic on arbitrary bytes; it
// returns structured parse/schema errors instead.
fuzz_target!(|data: &[u8]| {
    let _ = delorean::corpus::read_jsonl(std::io::BufReader::new(data));
});
