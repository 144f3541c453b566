#![no_main]

use libfuzzer_sys::fuzz_target;
use twode::env::io::read_latents;

// Input layout: u table, w table and optional patient table separated by NUL bytes.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut parts = text.splitn(3, '\0');
    let u = parts.next().unwrap_or("");
    let w = parts.next().unwrap_or("");
    let _ = read_latents(u, w, parts.next());
});
