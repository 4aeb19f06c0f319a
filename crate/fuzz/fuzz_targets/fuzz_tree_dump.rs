#![no_main]
use blockbp::tree::{parse_dump, write_dump};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((tree, noisy)) = parse_dump(text) {
        let dumped = write_dump(&tree, noisy.as_ref()).unwrap();
        let (tree2, noisy2) = parse_dump(&dumped).unwrap();
        assert_eq!(tree.node_count(), tree2.node_count());
        assert_eq!(tree.sigma_slice(), tree2.sigma_slice());
        assert_eq!(noisy, noisy2);
    }
});
