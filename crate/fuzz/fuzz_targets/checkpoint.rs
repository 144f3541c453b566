#![no_main]

use libfuzzer_sys::fuzz_target;
use twode::ntn::{parse_checkpoint, write_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = parse_checkpoint(text) {
            let again = write_checkpoint(&p);
            assert_eq!(parse_checkpoint(&again).unwrap(), p);
        }
    }
});
