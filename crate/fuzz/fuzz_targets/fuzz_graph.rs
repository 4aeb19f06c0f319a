#![no_main]
use blockbp::sbm::{load_graph, write_graph, write_labels};
use libfuzzer_sys::fuzz_target;

// Input carries both files: everything before the first 0xFF byte is the
// edge list, the rest is the labels sidecar.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0xFF).unwrap_or(data.len());
    let (edges, labels) = (&data[..split], &data[split.min(data.len())..]);
    let labels = if labels.is_empty() { labels } else { &labels[1..] };
    if let Ok(g) = load_graph(edges, labels) {
        let mut e = Vec::new();
        write_graph(&g, &mut e).unwrap();
        let mut l = Vec::new();
        write_labels(&g, &mut l).unwrap();
        let g2 = load_graph(&e[..], &l[..]).unwrap();
        assert_eq!(g.n(), g2.n());
        assert_eq!(g.sigma_slice(), g2.sigma_slice());
        for v in 0..g.n() {
            assert_eq!(g.neighbors(v), g2.neighbors(v));
        }
    }
});
