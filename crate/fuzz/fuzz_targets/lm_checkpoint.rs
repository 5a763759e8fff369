#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = delorean::checkpoint::parse_lm_bytes(data);
});
