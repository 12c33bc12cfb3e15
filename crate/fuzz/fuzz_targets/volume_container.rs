#![no_main]

use libfuzzer_sys::fuzz_target;

// Parsing a volume container from arbitrary bytes must never panic or
// over-allocate: payload length is validated against the header before any
// buffer is built.
fuzz_target!(|data: &[u8]| {
    let _ = frusseg::volume::parse_volume_bytes(data);
});
