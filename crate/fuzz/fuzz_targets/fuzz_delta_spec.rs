#![no_main]
use blockbp::config::DeltaSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = DeltaSpec::parse(text) {
        let again = DeltaSpec::parse(&spec.to_string_repr()).unwrap();
        assert_eq!(spec, again);
        // Resolving never reads the filesystem for the non-file variants.
        if !matches!(spec, DeltaSpec::File(_)) {
            for q in [3usize, 4, 7] {
                let _ = spec.resolve(q);
            }
        }
    }
});
