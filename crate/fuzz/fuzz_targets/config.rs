#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = twode::experiment::parse_config_str(text) {
            assert!(!spec.methods.is_empty() && !spec.n_list.is_empty());
            assert!(spec.gamma_list.iter().all(|g| (0.0..=1.0).contains(g)));
        }
    }
});
