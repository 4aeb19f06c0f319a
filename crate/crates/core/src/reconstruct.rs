//! End-to-end community reconstruction: amplify a spectral partition by
//! running belief propagation on each vertex's neighborhood, reading the
//! partition labels on the neighborhood boundary as noisy leaf observations.
//!
//! The per-vertex loop follows the reconstruction listing: partition the
//! graph with the vertex's interior ball removed, align that partition to a
//! reference run, read the boundary labels through the estimated channel,
//! and assign the vertex to the argmax of its BP posterior. Interior labels
//! are deliberately ignored; only the boundary feeds the posterior.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::assign::max_assignment;
use crate::bp::{ml_estimate, posterior_with_leaf_messages, Posterior};
use crate::error::Result;
use crate::model::{ModelParams, NoiseMatrix};
use crate::rng::{derive_seed, master_rng, stream_rng};
use crate::sbm::{ball, coupling_radius, SbmGraph};
use crate::spectral::{
    estimate_noise_matrix, gamma_observed, spectral_partition, uniformize, ConfusionMatrix,
    Partition,
};
use crate::tree;

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructOptions {
    /// Override the coupling-radius formula (it gives 0-1 at desk-scale n).
    pub r_override: Option<usize>,
    /// Evaluate the per-vertex loop on a random subset of this size instead
    /// of all of `V \ U`; remaining vertices keep their reference block.
    pub subsample: Option<usize>,
    /// Reuse the reference partition for every vertex instead of
    /// re-partitioning `G` minus each ball (n times faster, theoretically
    /// impure: the reference run saw the ball's edges).
    pub amortize: bool,
    /// Assign `U` from the reference partition instead of uniformly.
    pub assign_u_via_reference: bool,
    /// Debug mode: boundary labels are the true labels and the channel is
    /// the identity; couples the run to the exact tree problem.
    pub debug_exact_boundary: bool,
    /// Keep each evaluated vertex's posterior in the result.
    pub keep_posteriors: bool,
    pub seed: u64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            r_override: None,
            subsample: None,
            amortize: false,
            assign_u_via_reference: false,
            debug_exact_boundary: false,
            keep_posteriors: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionMeta {
    pub r: usize,
    pub r_from_formula: usize,
    pub delta_hat: ConfusionMatrix,
    pub delta_validation_error: Option<String>,
    /// Worst-community error of the reference partition vs ground truth.
    pub gamma_observed: f64,
    pub seed: u64,
    pub rng_name: &'static str,
    pub fallback_count: usize,
    pub evaluated: usize,
    pub subsample: Option<Vec<u32>>,
    pub amortized: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionResult {
    /// 1-based labels for every vertex.
    pub assign: Vec<u8>,
    /// Posteriors of the evaluated vertices (empty unless requested).
    pub posteriors: Vec<(u32, Posterior)>,
    pub meta: ReconstructionMeta,
}

/// Spectral blocks of the subgraph on `active` vertices (0 = not active).
fn spectral_blocks_masked(
    graph: &SbmGraph,
    q: usize,
    seed: u64,
    active: &[bool],
) -> Result<Vec<u8>> {
    // Copy the graph restricted to the mask. Vertex ids are preserved via a
    // dense remap so the partitioner itself stays mask-free.
    let n = graph.n();
    let mut remap = vec![u32::MAX; n];
    let mut back = Vec::new();
    for v in 0..n {
        if active[v] {
            remap[v] = back.len() as u32;
            back.push(v as u32);
        }
    }
    let mut edges = Vec::new();
    for v in 0..n {
        if !active[v] {
            continue;
        }
        for &u in graph.neighbors(v) {
            if (v as u32) < u && active[u as usize] {
                edges.push((remap[v], remap[u as usize]));
            }
        }
    }
    let sub = SbmGraph::from_edges(
        graph.params,
        back.len(),
        seed,
        false,
        vec![1u8; back.len()],
        &edges,
    )?;
    let part = spectral_partition(&sub, q, seed)?;
    let mut out = vec![0u8; n];
    for (i, &v) in back.iter().enumerate() {
        out[v as usize] = part.block_of(i);
    }
    Ok(out)
}

/// Align masked block labels to the reference over the active vertices and
/// return the relabeling map `old block -> new block`.
fn align_masked(blocks: &[u8], reference: &Partition, q: usize) -> Vec<u8> {
    let mut overlap = vec![0i64; q * q];
    for (v, &b) in blocks.iter().enumerate() {
        if b != 0 {
            let rb = reference.block_of(v) as usize - 1;
            overlap[rb * q + (b as usize - 1)] += 1;
        }
    }
    let assignment = max_assignment(&overlap, q);
    let mut map = vec![0u8; q + 1];
    for (i, &p) in assignment.perm.iter().enumerate() {
        map[p + 1] = i as u8 + 1;
    }
    map
}

/// Run the reconstruction algorithm.
pub fn reconstruct(
    graph: &SbmGraph,
    params: &ModelParams,
    options: &ReconstructOptions,
) -> Result<ReconstructionResult> {
    let n = graph.n();
    let q = params.q;
    let mut warnings = Vec::new();

    let r_formula = coupling_radius(n, params.a, params.b)?;
    let r = options.r_override.unwrap_or(r_formula);
    if r == 0 {
        warnings.push(
            "R = 0: the posterior has no boundary to read and degenerates to uniform".into(),
        );
    }

    // U and its high-degree members (one sample serves both).
    let hd = crate::spectral::select_high_degree(graph, derive_seed(options.seed, 1))?;
    let mut in_u = vec![false; n];
    for &v in &hd.subset {
        in_u[v as usize] = true;
    }

    // Reference partition and channel estimate.
    let reference = uniformize(&spectral_partition(graph, q, derive_seed(options.seed, 2))?);
    let gamma = gamma_observed(&reference, graph.sigma_slice(), q)?;

    let (delta_hat, delta_validation_error) = if options.debug_exact_boundary {
        let id = NoiseMatrix::identity(q);
        let entries: Vec<f64> = (0..q * q).map(|i| id.entry(i / q, i % q)).collect();
        (
            ConfusionMatrix {
                q,
                entries,
                mode: crate::spectral::ConfusionMode::Estimated,
            },
            None,
        )
    } else {
        let est = estimate_noise_matrix(graph, &reference, &hd.qualified)?;
        warnings.extend(est.warnings.clone());
        (est.matrix, est.validation_error)
    };
    if let Some(msg) = &delta_validation_error {
        warnings.push(format!("estimated channel violates assumptions: {msg}"));
    }
    // Leaf messages come from channel columns; normalize them once.
    let leaf_message = |t: usize| -> Vec<f64> {
        let col: Vec<f64> = (0..q).map(|i| delta_hat.entry(i, t)).collect();
        let sum: f64 = col.iter().sum();
        if sum > 0.0 {
            col.into_iter().map(|v| v / sum).collect()
        } else {
            vec![1.0 / q as f64; q]
        }
    };
    let leaf_messages_by_label: Vec<Vec<f64>> = (0..q).map(leaf_message).collect();

    // Evaluation set: V \ U, optionally subsampled.
    let mut pool: Vec<u32> = (0..n as u32).filter(|&v| !in_u[v as usize]).collect();
    let eval: Vec<u32> = match options.subsample {
        Some(s) if s < pool.len() => {
            let mut rng = master_rng(derive_seed(options.seed, 3));
            let (chosen, _) = pool.partial_shuffle(&mut rng, s);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            chosen
        }
        _ => pool,
    };

    // Baseline assignment: the reference block (overwritten per evaluated
    // vertex; U gets its random labels below).
    let mut assign: Vec<u8> = (0..n).map(|v| reference.block_of(v)).collect();

    struct PerVertex {
        v: u32,
        label: u8,
        posterior: Option<Posterior>,
        fell_back: bool,
    }

    let results: Vec<PerVertex> = eval
        .par_iter()
        .map(|&v| {
            let fallback = |reason: bool| PerVertex {
                v,
                label: reference.block_of(v as usize),
                posterior: None,
                fell_back: reason,
            };
            if r == 0 {
                // Uniform posterior: argmax ties to label 1.
                return PerVertex {
                    v,
                    label: 1,
                    posterior: None,
                    fell_back: false,
                };
            }
            let b = match ball(graph, v as usize, r) {
                Ok(b) => b,
                Err(_) => return fallback(true),
            };
            if b.depth() < r || b.boundary().is_empty() {
                // Component ran out before the boundary: no evidence.
                return fallback(true);
            }

            // Labels on the boundary, aligned to the reference run.
            let boundary = b.boundary();
            let tau: Vec<u8> = if options.debug_exact_boundary {
                boundary.iter().map(|&u| graph.sigma(u as usize)).collect()
            } else if options.amortize {
                boundary
                    .iter()
                    .map(|&u| reference.block_of(u as usize))
                    .collect()
            } else {
                let mut active = vec![true; graph.n()];
                for (k, win) in b.level_start.windows(2).enumerate() {
                    if k + 1 < b.level_start.len() - 1 {
                        // Interior: distance <= r - 1.
                        for &u in &b.nodes[win[0]..win[1]] {
                            active[u as usize] = false;
                        }
                    }
                }
                let blocks = match spectral_blocks_masked(
                    graph,
                    q,
                    derive_seed(options.seed, 1000 + v as u64),
                    &active,
                ) {
                    Ok(bl) => bl,
                    Err(_) => return fallback(true),
                };
                let map = align_masked(&blocks, &reference, q);
                boundary
                    .iter()
                    .map(|&u| map[blocks[u as usize] as usize])
                    .collect()
            };

            // BP on the ball's BFS tree with boundary-only evidence.
            let level_start: Vec<u32> = b.level_start.iter().map(|&x| x as u32).collect();
            let ball_tree = tree::from_bfs_parts(level_start, b.parent.clone());
            let leaves: Vec<Vec<f64>> = tau
                .iter()
                .map(|&t| leaf_messages_by_label[t as usize - 1].clone())
                .collect();
            match posterior_with_leaf_messages(&ball_tree, r, &leaves, params) {
                Ok(post) => PerVertex {
                    v,
                    label: ml_estimate(&post),
                    posterior: options.keep_posteriors.then(|| post),
                    fell_back: false,
                },
                Err(_) => fallback(true),
            }
        })
        .collect();

    let mut posteriors = Vec::new();
    let mut fallback_count = 0usize;
    for r in &results {
        assign[r.v as usize] = r.label;
        if r.fell_back {
            fallback_count += 1;
        }
        if let Some(p) = &r.posterior {
            posteriors.push((r.v, p.clone()));
        }
    }

    // U: uniform random labels, exactly as the listing discards them.
    for &v in &hd.subset {
        if options.assign_u_via_reference {
            assign[v as usize] = reference.block_of(v as usize);
        } else {
            let mut rng = stream_rng(options.seed, 500_000 + v as u64);
            assign[v as usize] = rng.gen_range(0..q as u32) as u8 + 1;
        }
    }

    Ok(ReconstructionResult {
        assign,
        posteriors,
        meta: ReconstructionMeta {
            r,
            r_from_formula: r_formula,
            delta_hat,
            delta_validation_error,
            gamma_observed: gamma,
            seed: options.seed,
            rng_name: crate::rng::RNG_NAME,
            fallback_count,
            evaluated: eval.len(),
            subsample: options.subsample.map(|_| eval.clone()),
            amortized: options.amortize,
            warnings,
        },
    })
}

/// Permutation-invariant agreement: the best over label permutations of the
/// fraction of vertices on which `assign` matches `truth`. Always at least
/// `1/q` (averaging over permutations gives exactly `1/q`).
pub fn accuracy(assign: &[u8], truth: &[u8], q: usize) -> f64 {
    assert_eq!(assign.len(), truth.len());
    let n = assign.len();
    if n == 0 {
        return 1.0;
    }
    let mut overlap = vec![0i64; q * q];
    for v in 0..n {
        overlap[(assign[v] as usize - 1) * q + (truth[v] as usize - 1)] += 1;
    }
    let best = max_assignment(&overlap, q);
    best.total as f64 / n as f64
}

/// Accuracy restricted to a subset of vertices.
pub fn accuracy_on(assign: &[u8], truth: &[u8], q: usize, subset: &[u32]) -> f64 {
    let a: Vec<u8> = subset.iter().map(|&v| assign[v as usize]).collect();
    let t: Vec<u8> = subset.iter().map(|&v| truth[v as usize]).collect();
    accuracy(&a, &t, q)
}
