#![no_main]

use libfuzzer_sys::fuzz_target;
use twode::env::io::{read_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(d) = read_dataset(text) {
            // Whatever parses must survive a write/read cycle unchanged.
            assert_eq!(read_dataset(&write_dataset(&d)).unwrap(), d);
        }
    }
});
