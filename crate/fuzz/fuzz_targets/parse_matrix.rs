#![no_main]

use latent_reml::io::{format_matrix, parse_matrix, Layout};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rows) = parse_matrix(text, Layout::SamplesRows) else { return };
    let cols = parse_matrix(text, Layout::SamplesCols).expect("layout does not affect validity");
    assert_eq!(rows.values.transpose().to_owned(), cols.values);
    assert!(rows.values.is_all_finite());
    // what was accepted must survive a write/read cycle unchanged
    let again = format_matrix(rows.values.as_ref(), &rows.row_ids, &rows.col_ids, "id");
    if rows.row_ids.iter().chain(&rows.col_ids).all(|l| !l.contains(['\t', '\n', '\r']) && l.trim() == l) {
        if let Ok(back) = parse_matrix(&again, Layout::SamplesRows) {
            assert_eq!(back.values, rows.values);
        }
    }
});
