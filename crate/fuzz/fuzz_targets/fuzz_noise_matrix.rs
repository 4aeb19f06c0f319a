#![no_main]
use blockbp::model::NoiseMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = NoiseMatrix::parse_text(text) {
        // Accepted channels survive a write/parse cycle and stay valid.
        let again = NoiseMatrix::parse_text(&m.to_text()).unwrap();
        assert_eq!(m, again);
    }
});
