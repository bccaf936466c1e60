#![no_main]

use latent_reml::io::parse_summary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(summary) = parse_summary(text) else { return };
    let back = parse_summary(&summary.to_text()).expect("formatted summary parses");
    assert_eq!(back.entries(), summary.entries());
});
