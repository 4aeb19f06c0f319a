#![no_main]
use blockbp::spectral::{uniformize, Partition};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = Partition::parse_text(text) {
        let again = Partition::parse_text(&p.to_text()).unwrap();
        assert_eq!(p, again);
        // Uniformization is total, size-correct, and idempotent on any
        // accepted partition.
        let u = uniformize(&p);
        let (max, min) = (
            u.block_sizes().iter().max().unwrap(),
            u.block_sizes().iter().min().unwrap(),
        );
        assert!(max - min <= 1);
        assert_eq!(uniformize(&u), u);
    }
});
