//! Statistical checks of the tree samplers against closed-form and
//! fixed-point oracles.

use blockbp::majority::expected_s;
use blockbp::model::{ModelParams, NoiseMatrix};
use blockbp::rng::derive_seed;
use blockbp::tree::{
    apply_noise, broadcast_labels, sample_gw_tree, sample_regular_tree, DEFAULT_NODE_BUDGET,
};

fn reference() -> ModelParams {
    ModelParams::new(3, 15.0, 3.0).unwrap() // d=7, lambda=4/7
}

#[test]
fn gw_offspring_mean_matches_branching_process() {
    // Level-2 population over many samples has mean d^2 (d=7, k=2 -> 49).
    let trials = 4000;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for t in 0..trials {
        let tree = sample_gw_tree(7.0, 2, derive_seed(11, t), DEFAULT_NODE_BUDGET).unwrap();
        let size = tree.level(2).map(|r| r.len()).unwrap_or(0) as f64;
        sum += size;
        sumsq += size * size;
    }
    let n = trials as f64;
    let mean = sum / n;
    let sd = ((sumsq / n - mean * mean) / n).sqrt();
    assert!(
        (mean - 49.0).abs() < 5.0 * sd,
        "level-2 mean {mean}, se {sd}"
    );
}

#[test]
fn gw_extinction_matches_fixed_point() {
    // Subcritical d = 0.5: extinction probability solves x = e^{d(x-1)},
    // computed here by fixed-point iteration from 0 (the smallest root).
    let d = 0.5f64;
    let mut x = 0.0f64;
    for _ in 0..200 {
        x = (d * (x - 1.0)).exp();
    }
    let depth = 30;
    let trials = 10_000u64;
    let mut extinct = 0usize;
    for t in 0..trials {
        let tree = sample_gw_tree(d, depth, derive_seed(23, t), DEFAULT_NODE_BUDGET).unwrap();
        if tree.depth() < depth {
            extinct += 1;
        }
    }
    let freq = extinct as f64 / trials as f64;
    let se = (x * (1.0 - x) / trials as f64).sqrt().max(1.0 / trials as f64);
    assert!((freq - x).abs() < 5.0 * se, "extinction {freq} vs {x}");

    // Supercritical d = 1.5: the root of x = e^{1.5(x-1)} is interior.
    let d = 1.5f64;
    let mut x = 0.0f64;
    for _ in 0..500 {
        x = (d * (x - 1.0)).exp();
    }
    assert!(x > 0.2 && x < 0.8);
    let mut extinct = 0usize;
    for t in 0..trials {
        let tree = sample_gw_tree(d, 25, derive_seed(29, t), DEFAULT_NODE_BUDGET).unwrap();
        if tree.depth() < 25 {
            extinct += 1;
        }
    }
    let freq = extinct as f64 / trials as f64;
    let se = (x * (1.0 - x) / trials as f64).sqrt();
    assert!((freq - x).abs() < 5.0 * se, "extinction {freq} vs {x}");
}

#[test]
fn broadcast_depth1_flip_rate() {
    // One wide depth-1 tree: fraction matching the root is 1-p up to
    // binomial noise (d = 10^5 children).
    let params = ModelParams::new(3, 14.0, 3.0).unwrap(); // p = 0.3
    let d = 100_000;
    let tree = sample_regular_tree(d, 1, DEFAULT_NODE_BUDGET).unwrap();
    let tree = broadcast_labels(tree, &params, 1, 77).unwrap();
    let hits = tree
        .level(1)
        .unwrap()
        .filter(|&u| tree.sigma(u) == 1)
        .count() as f64;
    let frac = hits / d as f64;
    let se = (0.7f64 * 0.3 / d as f64).sqrt();
    assert!((frac - 0.7).abs() < 5.0 * se, "keep fraction {frac}");
}

#[test]
fn broadcast_marginal_matches_closed_form() {
    // P(sigma_v = sigma_root) at depth k is (1 + (q-1) lambda^k)/q; checked
    // by Monte Carlo over trees, which is the E[S_v] identity in disguise.
    let params = reference();
    let trials = 10_000u64;
    let k = 3;
    let mut hits = 0u64;
    let mut total = 0u64;
    for t in 0..trials {
        let tree = sample_regular_tree(2, k, DEFAULT_NODE_BUDGET).unwrap();
        let tree = broadcast_labels(tree, &params, 1, derive_seed(31, t)).unwrap();
        for u in tree.level(k).unwrap() {
            total += 1;
            if tree.sigma(u) == 1 {
                hits += 1;
            }
        }
    }
    let frac = hits as f64 / total as f64;
    let oracle = (1.0 + 2.0 * params.lambda.powi(k as i32)) / 3.0;
    // Also the E[S_v] route: P = (1 + E[S_v]) / 2.
    let via_s = (1.0 + expected_s(&params, k as usize)) / 2.0;
    assert!((oracle - via_s).abs() < 1e-12);
    // Leaves within a tree are correlated; se over independent trees.
    let se = (oracle * (1.0 - oracle) / trials as f64).sqrt() * 2.0;
    assert!((frac - oracle).abs() < 5.0 * se, "{frac} vs {oracle}");
}

#[test]
fn sibling_subtrees_are_conditionally_independent() {
    // Given the root, the (centered) root-agreement indicators of the two
    // level-1 subtrees are uncorrelated.
    let params = reference();
    let trials = 20_000u64;
    let mut s1 = Vec::with_capacity(trials as usize);
    let mut s2 = Vec::with_capacity(trials as usize);
    for t in 0..trials {
        let tree = sample_regular_tree(2, 2, DEFAULT_NODE_BUDGET).unwrap();
        let tree = broadcast_labels(tree, &params, 1, derive_seed(41, t)).unwrap();
        let leaves: Vec<usize> = tree.level(2).unwrap().collect();
        // Leaves 0,1 descend from child 1; leaves 2,3 from child 2.
        s1.push((tree.sigma(leaves[0]) == 1) as u8 as f64);
        s2.push((tree.sigma(leaves[2]) == 1) as u8 as f64);
    }
    // The root label is fixed, so the two subtree statistics are fully
    // independent: their covariance is zero up to Monte Carlo noise.
    let n = trials as f64;
    let m1: f64 = s1.iter().sum::<f64>() / n;
    let m2: f64 = s2.iter().sum::<f64>() / n;
    let cov: f64 = s1
        .iter()
        .zip(&s2)
        .map(|(a, b)| (a - m1) * (b - m2))
        .sum::<f64>()
        / n;
    let se = (m1 * (1.0 - m1) * m2 * (1.0 - m2)).sqrt() / n.sqrt();
    assert!(cov.abs() < 5.0 * se, "cov {cov}, se {se}");
}

#[test]
fn noise_frequencies_match_channel_row() {
    // 10^5 nodes with sigma = 1 through a (0.8, 0.1, 0.1) row.
    let params = ModelParams::new(3, 30.0, 0.0).unwrap(); // p = 0: all labels 1
    let d = 100_000;
    let tree = sample_regular_tree(d, 1, DEFAULT_NODE_BUDGET).unwrap();
    let tree = broadcast_labels(tree, &params, 1, 5).unwrap();
    let delta = NoiseMatrix::uniform_diag(3, 0.8).unwrap();
    let nl = apply_noise(&tree, 1, &delta, 9).unwrap();
    let mut counts = [0u64; 3];
    for &t in &nl.tau {
        counts[t as usize - 1] += 1;
    }
    for (j, want) in [(0usize, 0.8f64), (1, 0.1), (2, 0.1)] {
        let got = counts[j] as f64 / d as f64;
        let se = (want * (1.0 - want) / d as f64).sqrt();
        assert!((got - want).abs() < 5.0 * se, "tau[{j}] {got} vs {want}");
    }
}

#[test]
fn determinism_bit_identical() {
    let params = reference();
    let a = sample_gw_tree(7.0, 3, 123, DEFAULT_NODE_BUDGET).unwrap();
    let b = sample_gw_tree(7.0, 3, 123, DEFAULT_NODE_BUDGET).unwrap();
    assert_eq!(a, b);
    let la = broadcast_labels(a, &params, 2, 9).unwrap();
    let lb = broadcast_labels(b, &params, 2, 9).unwrap();
    assert_eq!(la, lb);
    let delta = NoiseMatrix::uniform_diag(3, 0.8).unwrap();
    let na = apply_noise(&la, 2, &delta, 4).unwrap();
    let nb = apply_noise(&lb, 2, &delta, 4).unwrap();
    assert_eq!(na, nb);
}
