#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = frusseg::network::checkpoint::parse_checkpoint_bytes(data);
});
