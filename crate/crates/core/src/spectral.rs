//! Spectral partitioning of block-model graphs, partition uniformization and
//! alignment across runs, and noise-matrix computation/estimation.
//!
//! The partitioner is a standard pipeline: trim very-high-degree vertices,
//! take the top-q eigenvectors of the (shifted) adjacency by subspace
//! iteration, row-normalize, and cluster with q-means under several
//! restarts. Downstream code depends only on the resulting partition being
//! gamma-correct at strong signal, not on the specific algorithm.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::assign::{max_assignment, Assignment};
use crate::error::{Error, Result};
use crate::model::NoiseMatrix;
use crate::rng::master_rng;
use crate::sbm::SbmGraph;

/// A q-block vertex partition; block labels are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    q: usize,
    assign: Vec<u8>,
    block_sizes: Vec<usize>,
}

impl Partition {
    pub fn new(q: usize, assign: Vec<u8>) -> Result<Self> {
        let mut block_sizes = vec![0usize; q];
        for &b in &assign {
            if b == 0 || b as usize > q {
                return Err(Error::PartitionBlockCount {
                    got: b as usize,
                    expected: q,
                });
            }
            block_sizes[b as usize - 1] += 1;
        }
        Ok(Partition {
            q,
            assign,
            block_sizes,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.assign.len()
    }

    pub fn block_of(&self, v: usize) -> u8 {
        self.assign[v]
    }

    pub fn assign_slice(&self) -> &[u8] {
        &self.assign
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    /// Serialize as `v block` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (v, &b) in self.assign.iter().enumerate() {
            out.push_str(&format!("{v} {b}\n"));
        }
        out
    }

    /// Parse `v block` lines; `q` is inferred from the largest block index.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, u8)> = Vec::new();
        let mut max_block = 0u8;
        for (ln, raw) in text.lines().enumerate() {
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = t.split_whitespace().collect();
            if toks.len() != 2 {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: "expected `v block`".into(),
                });
            }
            let v: usize = toks[0].parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad vertex `{}`", toks[0]),
            })?;
            let b: u8 = toks[1]
                .parse()
                .ok()
                .filter(|&b| b >= 1)
                .ok_or_else(|| Error::Parse {
                    line: ln + 1,
                    msg: format!("bad block `{}`", toks[1]),
                })?;
            if v > 100_000_000 {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("vertex id {v} exceeds the supported maximum"),
                });
            }
            max_block = max_block.max(b);
            entries.push((v, b));
        }
        if entries.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "empty partition".into(),
            });
        }
        let n = entries.iter().map(|&(v, _)| v).max().unwrap() + 1;
        let mut assign = vec![0u8; n];
        for (v, b) in entries {
            if assign[v] != 0 {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("vertex {v} assigned twice"),
                });
            }
            assign[v] = b;
        }
        if let Some(v) = assign.iter().position(|&b| b == 0) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("vertex {v} has no block"),
            });
        }
        Partition::new(max_block as usize, assign)
    }
}

// ---------------------------------------------------------------------------
// Spectral partitioner
// ---------------------------------------------------------------------------

fn orthonormalize(v: &mut [Vec<f64>], rng: &mut impl Rng) -> Result<()> {
    let q = v.len();
    let n = v[0].len();
    for i in 0..q {
        for j in 0..i {
            let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            for t in 0..n {
                v[i][t] -= dot * v[j][t];
            }
        }
        let norm: f64 = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::EigenFailure("non-finite vector norm".into()));
        }
        if norm < 1e-12 {
            // Deflated column: reseed and retry once against the others.
            for t in 0..n {
                v[i][t] = rng.gen::<f64>() - 0.5;
            }
            for j in 0..i {
                let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                for t in 0..n {
                    v[i][t] -= dot * v[j][t];
                }
            }
            let norm2: f64 = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm2 < 1e-12 {
                return Err(Error::EigenFailure("subspace collapsed".into()));
            }
            for t in 0..n {
                v[i][t] /= norm2;
            }
        } else {
            for t in 0..n {
                v[i][t] /= norm;
            }
        }
    }
    Ok(())
}

/// Top-q eigenvectors of the shifted adjacency restricted to `kept`,
/// by subspace iteration. Returns row-major n x q embedding (zero rows for
/// excluded vertices).
fn top_eigenvectors(
    graph: &SbmGraph,
    kept: &[bool],
    q: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let n = graph.n();
    let max_deg = (0..n)
        .filter(|&v| kept[v])
        .map(|v| graph.neighbors(v).iter().filter(|&&u| kept[u as usize]).count())
        .max()
        .unwrap_or(0);
    // Shift making the matrix positive semidefinite-ish so the largest
    // eigenvalues by value are also largest by magnitude.
    let shift = 2.0 * (max_deg as f64).sqrt() + 1.0;

    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|_| (0..n).map(|_| rng.gen::<f64>() - 0.5).collect())
        .collect();
    for col in &mut v {
        for (t, val) in col.iter_mut().enumerate() {
            if !kept[t] {
                *val = 0.0;
            }
        }
    }
    orthonormalize(&mut v, rng)?;

    let mut thetas = vec![0.0f64; q];
    let mut y = vec![0.0f64; n];
    for _iter in 0..500 {
        let mut new_thetas = vec![0.0f64; q];
        for (ci, col) in v.iter_mut().enumerate() {
            y.iter_mut().for_each(|t| *t = 0.0);
            for u in 0..n {
                if !kept[u] {
                    continue;
                }
                let mut acc = shift * col[u];
                for &w in graph.neighbors(u) {
                    if kept[w as usize] {
                        acc += col[w as usize];
                    }
                }
                y[u] = acc;
            }
            new_thetas[ci] = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            col.copy_from_slice(&y);
        }
        orthonormalize(&mut v, rng)?;
        let done = thetas
            .iter()
            .zip(&new_thetas)
            .all(|(a, b)| (a - b).abs() <= 1e-10 * (b.abs() + 1.0));
        thetas = new_thetas;
        if done {
            break;
        }
    }
    if thetas.iter().any(|t| !t.is_finite()) {
        return Err(Error::EigenFailure("non-finite Ritz values".into()));
    }

    let mut embedding = vec![0.0f64; n * q];
    for (ci, col) in v.iter().enumerate() {
        for t in 0..n {
            embedding[t * q + ci] = col[t];
        }
    }
    Ok(embedding)
}

fn kmeans(
    points: &[f64],
    idx: &[u32],
    dim: usize,
    k: usize,
    restarts: usize,
    max_iter: usize,
    rng: &mut impl Rng,
) -> (Vec<u8>, f64) {
    let m = idx.len();
    let point = |i: usize| -> &[f64] {
        let v = idx[i] as usize;
        &points[v * dim..(v + 1) * dim]
    };
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    let mut best_assign = vec![0u8; m];
    let mut best_inertia = f64::INFINITY;
    for _ in 0..restarts {
        // k-means++ seeding.
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        centers.push(point(rng.gen_range(0..m)).to_vec());
        let mut d2: Vec<f64> = (0..m).map(|i| dist2(point(i), &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let next = if total <= 0.0 {
                rng.gen_range(0..m)
            } else {
                let mut u = rng.gen::<f64>() * total;
                let mut pick = m - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            };
            centers.push(point(next).to_vec());
            for i in 0..m {
                d2[i] = d2[i].min(dist2(point(i), centers.last().unwrap()));
            }
        }

        let mut assign = vec![0u8; m];
        let mut inertia = f64::INFINITY;
        for _ in 0..max_iter {
            let mut changed = false;
            let mut new_inertia = 0.0;
            for i in 0..m {
                let mut best = (f64::INFINITY, 0u8);
                for (c, center) in centers.iter().enumerate() {
                    let d = dist2(point(i), center);
                    if d < best.0 {
                        best = (d, c as u8);
                    }
                }
                new_inertia += best.0;
                if assign[i] != best.1 {
                    assign[i] = best.1;
                    changed = true;
                }
            }
            // Recompute centers; reseat any emptied cluster at the farthest point.
            let mut counts = vec![0usize; k];
            let mut sums = vec![vec![0.0f64; dim]; k];
            for i in 0..m {
                let c = assign[i] as usize;
                counts[c] += 1;
                for (s, &x) in sums[c].iter_mut().zip(point(i)) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let far = (0..m)
                        .max_by(|&a, &b| {
                            dist2(point(a), &centers[assign[a] as usize])
                                .partial_cmp(&dist2(point(b), &centers[assign[b] as usize]))
                                .unwrap_or(std::cmp::Ordering::Equal)
                        })
                        .unwrap();
                    centers[c] = point(far).to_vec();
                    changed = true;
                } else {
                    for (t, s) in centers[c].iter_mut().zip(&sums[c]) {
                        *t = s / counts[c] as f64;
                    }
                }
            }
            inertia = new_inertia;
            if !changed {
                break;
            }
        }
        if inertia < best_inertia {
            best_inertia = inertia;
            best_assign.copy_from_slice(&assign);
        }
    }
    (best_assign, best_inertia)
}

/// Spectral q-block partition: degree trimming, subspace iteration on the
/// shifted adjacency, row normalization, q-means with 20 restarts.
pub fn spectral_partition(graph: &SbmGraph, q: usize, seed: u64) -> Result<Partition> {
    let n = graph.n();
    if n == 0 {
        return Err(Error::GraphTooSmall { n, q });
    }
    let mut rng = master_rng(seed);
    let trim_threshold = 20.0 * (graph.params.a + graph.params.b);
    let kept: Vec<bool> = (0..n)
        .map(|v| (graph.degree(v) as f64) <= trim_threshold)
        .collect();

    let mut embedding = top_eigenvectors(graph, &kept, q, &mut rng)?;
    // Spherical normalization of the kept rows.
    for v in 0..n {
        let row = &mut embedding[v * q..(v + 1) * q];
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }

    let kept_idx: Vec<u32> = (0..n).filter(|&v| kept[v]).map(|v| v as u32).collect();
    if kept_idx.is_empty() {
        return Err(Error::EigenFailure("every vertex was trimmed".into()));
    }
    let (labels, _inertia) = kmeans(&embedding, &kept_idx, q, q, 20, 100, &mut rng);

    let mut assign = vec![0u8; n];
    for (i, &v) in kept_idx.iter().enumerate() {
        assign[v as usize] = labels[i] + 1;
    }
    // Trimmed vertices: majority block among kept neighbors, else round-robin.
    for v in 0..n {
        if assign[v] != 0 {
            continue;
        }
        let mut votes = vec![0usize; q];
        for &u in graph.neighbors(v) {
            let b = assign[u as usize];
            if b != 0 {
                votes[b as usize - 1] += 1;
            }
        }
        let best = votes
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .map(|(i, &c)| if c > 0 { i + 1 } else { v % q + 1 })
            .unwrap_or(v % q + 1);
        assign[v] = best as u8;
    }
    Partition::new(q, assign)
}

// ---------------------------------------------------------------------------
// Uniformization, alignment, confusion
// ---------------------------------------------------------------------------

/// Even the block sizes to within one vertex, moving as few vertices as
/// possible (over-full blocks surrender their highest-index members to the
/// under-full blocks in index order).
pub fn uniformize(partition: &Partition) -> Partition {
    let q = partition.q;
    let n = partition.n();
    let base = n / q;
    let remainder = n % q;

    // Give the +1 capacities to the currently largest blocks (minimal moves);
    // ties resolve to the lower block index.
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by_key(|&b| (std::cmp::Reverse(partition.block_sizes[b]), b));
    let mut capacity = vec![base; q];
    for &b in order.iter().take(remainder) {
        capacity[b] += 1;
    }

    let mut assign = partition.assign.clone();
    let mut sizes = partition.block_sizes.clone();
    let mut surplus: Vec<usize> = Vec::new();
    for v in (0..n).rev() {
        let b = assign[v] as usize - 1;
        if sizes[b] > capacity[b] {
            sizes[b] -= 1;
            surplus.push(v);
        }
    }
    for b in 0..q {
        while sizes[b] < capacity[b] {
            let v = surplus.pop().expect("surplus covers all deficits");
            assign[v] = b as u8 + 1;
            sizes[b] += 1;
        }
    }
    Partition {
        q,
        assign,
        block_sizes: sizes,
    }
}

/// Block pairing between two partitions of the same vertex set.
#[derive(Debug, Clone, Serialize)]
pub struct BlockAlignment {
    /// `perm[i]` = 1-based partition block paired with reference block `i+1`.
    pub perm: Vec<u8>,
    /// Whether another pairing ties the optimum (known for q <= 8).
    pub tied: Option<bool>,
    /// Total overlap achieved by the pairing.
    pub overlap: u64,
}

/// Find the permutation maximizing `sum_i |P_{perm(i)} cap Ref_i|`.
pub fn align(partition: &Partition, reference: &Partition) -> Result<BlockAlignment> {
    if partition.n() != reference.n() {
        return Err(Error::PartitionSizeMismatch {
            left: partition.n(),
            right: reference.n(),
        });
    }
    let q = partition.q.max(reference.q);
    let mut overlap = vec![0i64; q * q];
    for v in 0..partition.n() {
        let pb = partition.assign[v] as usize - 1;
        let rb = reference.assign[v] as usize - 1;
        overlap[rb * q + pb] += 1;
    }
    let Assignment { perm, total, tied } = max_assignment(&overlap, q);
    Ok(BlockAlignment {
        perm: perm.iter().map(|&p| p as u8 + 1).collect(),
        tied,
        overlap: total as u64,
    })
}

/// Relabel a partition so its blocks line up with the reference:
/// vertices in partition block `perm[i]` get label `i+1`.
pub fn relabel(partition: &Partition, alignment: &BlockAlignment) -> Partition {
    let q = partition.q;
    let mut inverse = vec![0u8; q + 1];
    for (i, &p) in alignment.perm.iter().enumerate() {
        inverse[p as usize] = i as u8 + 1;
    }
    let assign: Vec<u8> = partition.assign.iter().map(|&b| inverse[b as usize]).collect();
    Partition::new(q, assign).expect("relabeling preserves block range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConfusionMode {
    Exact,
    Estimated,
}

/// A q x q confusion matrix: entry (i, j) relates true community `i+1` to
/// partition block `j+1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub q: usize,
    /// Row-major entries.
    pub entries: Vec<f64>,
    pub mode: ConfusionMode,
}

impl ConfusionMatrix {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.q + j]
    }

    /// Validate against the noise-channel assumptions.
    pub fn to_noise_matrix(&self) -> Result<NoiseMatrix> {
        let rows: Vec<Vec<f64>> = (0..self.q)
            .map(|i| self.entries[i * self.q..(i + 1) * self.q].to_vec())
            .collect();
        NoiseMatrix::validate(self.q, &rows)
    }
}

/// The exact confusion matrix of a (uniformized) partition against ground
/// truth: `(q/n) (|V^i cap W^j| - (|W^j| - n/q)/q)`. The correction spreads
/// each block's deviation from `n/q` evenly over its column, which makes
/// every column sum exactly 1 (in exact arithmetic) even when q does not
/// divide n.
pub fn confusion_exact(partition: &Partition, truth: &[u8], q: usize, n: usize) -> ConfusionMatrix {
    debug_assert_eq!(partition.n(), n);
    let mut counts = vec![0u64; q * q];
    for v in 0..n {
        let i = truth[v] as usize - 1;
        let j = partition.assign[v] as usize - 1;
        counts[i * q + j] += 1;
    }
    let qf = q as f64;
    let nf = n as f64;
    let mut entries = vec![0.0f64; q * q];
    for j in 0..q {
        let w = partition.block_sizes[j] as f64;
        let corr = (w - nf / qf) / qf;
        for i in 0..q {
            entries[i * q + j] = qf / nf * (counts[i * q + j] as f64 - corr);
        }
    }
    ConfusionMatrix {
        q,
        entries,
        mode: ConfusionMode::Exact,
    }
}

/// Integer-exact column-sum witness: `n*q*delta[i][j] = q^2 o_ij - q w_j + n`
/// summed over `i` equals `n*q` for every column.
pub fn confusion_column_sums_exact(partition: &Partition, truth: &[u8], q: usize, n: usize) -> bool {
    let mut counts = vec![0i64; q * q];
    for v in 0..n {
        let i = truth[v] as usize - 1;
        let j = partition.assign[v] as usize - 1;
        counts[i * q + j] += 1;
    }
    (0..q).all(|j| {
        let w = partition.block_sizes[j] as i64;
        let col: i64 = (0..q)
            .map(|i| (q * q) as i64 * counts[i * q + j] - q as i64 * w + n as i64)
            .sum();
        col == (n * q) as i64
    })
}

// ---------------------------------------------------------------------------
// High-degree anchors and noise estimation
// ---------------------------------------------------------------------------

/// A uniform vertex sample together with its high-degree members.
#[derive(Debug, Clone, Serialize)]
pub struct HighDegreeSample {
    /// The uniformly sampled subset U, |U| = floor(sqrt(n)).
    pub subset: Vec<u32>,
    /// Degree threshold `k = round((1/4) ln n / ln ln n)`.
    pub threshold: usize,
    /// Members of U with degree >= threshold, sorted by decreasing degree.
    pub qualified: Vec<u32>,
}

/// Sample `U` of size `floor(sqrt n)` and keep its members of degree at
/// least `k`. Degree >= k (rather than exactly k) is used: the estimation
/// only needs confidently-labeled anchors and more edges is strictly better.
pub fn select_high_degree(graph: &SbmGraph, seed: u64) -> Result<HighDegreeSample> {
    let n = graph.n();
    if n < 100 {
        return Err(Error::AnchorSampleTooSmall { n });
    }
    let mut rng = master_rng(seed);
    let size = (n as f64).sqrt().floor() as usize;
    let mut order: Vec<u32> = (0..n as u32).collect();
    let (subset_slice, _) = order.partial_shuffle(&mut rng, size);
    let subset: Vec<u32> = subset_slice.to_vec();

    let ln_n = (n as f64).ln();
    let threshold = (0.25 * ln_n / ln_n.ln()).round().max(1.0) as usize;
    let mut qualified: Vec<u32> = subset
        .iter()
        .copied()
        .filter(|&v| graph.degree(v as usize) >= threshold)
        .collect();
    qualified.sort_by_key(|&v| (std::cmp::Reverse(graph.degree(v as usize)), v));
    if qualified.is_empty() {
        return Err(Error::NoHighDegreeVertices { k: threshold, n });
    }
    Ok(HighDegreeSample {
        subset,
        threshold,
        qualified,
    })
}

/// Result of estimating the channel between true communities and partition
/// blocks from anchor neighborhoods.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseEstimate {
    pub matrix: ConfusionMatrix,
    /// One (block, vertex, degree) anchor per block.
    pub anchors: Vec<(u8, u32, usize)>,
    pub warnings: Vec<String>,
    /// Error message when the estimate violates the channel assumptions
    /// (reported rather than silently accepted).
    pub validation_error: Option<String>,
}

/// Estimate the noise matrix from the high-degree anchors: neighbor-block
/// counts are pooled over every anchor a block holds (each anchor's labeled
/// block stands in for its community), giving the raw fractions `g[i][j]`.
/// One edge out `g = M delta`, so `delta = M^{-1} g` with the closed-form
/// inverse `M^{-1} = (1/lambda)(I - (p/(q-1)) J)`. Rows are clipped to
/// [0,1] and renormalized.
///
/// Pooling across anchors (rather than one representative per block) cuts
/// the per-entry variance by the number of anchors; the highest-degree
/// member of each block is still designated and reported.
pub fn estimate_noise_matrix(
    graph: &SbmGraph,
    partition: &Partition,
    candidates: &[u32],
) -> Result<NoiseEstimate> {
    let q = partition.q();
    let params = &graph.params;
    if params.lambda.abs() < 1e-9 {
        return Err(Error::SingularTransition);
    }
    let mut warnings = Vec::new();

    // Highest-degree candidate inside each block (ties to the lower id).
    let mut anchors: Vec<Option<(u32, usize)>> = vec![None; q];
    for &v in candidates {
        let b = partition.block_of(v as usize) as usize - 1;
        let deg = graph.degree(v as usize);
        let better = match anchors[b] {
            None => true,
            Some((best_v, best_d)) => deg > best_d || (deg == best_d && v < best_v),
        };
        if better {
            anchors[b] = Some((v, deg));
        }
    }
    let mut anchor_list = Vec::with_capacity(q);
    for (b, a) in anchors.iter().enumerate() {
        match a {
            Some((v, deg)) => {
                if *deg < 10 {
                    warnings.push(format!(
                        "anchor {v} for block {} has degree {deg} < 10; estimate will be noisy",
                        b + 1
                    ));
                }
                anchor_list.push((b as u8 + 1, *v, *deg));
            }
            None => return Err(Error::AnchorMissing { block: b as u8 + 1 }),
        }
    }

    // Raw neighbor-block fractions, pooled over all anchors per block.
    let mut counts = vec![0.0f64; q * q];
    let mut totals = vec![0.0f64; q];
    for &v in candidates {
        let i = partition.block_of(v as usize) as usize - 1;
        for &u in graph.neighbors(v as usize) {
            let j = partition.block_of(u as usize) as usize - 1;
            counts[i * q + j] += 1.0;
        }
        totals[i] += graph.degree(v as usize) as f64;
    }
    let mut g = vec![0.0f64; q * q];
    for i in 0..q {
        if totals[i] == 0.0 {
            return Err(Error::AnchorMissing { block: i as u8 + 1 });
        }
        for j in 0..q {
            g[i * q + j] = counts[i * q + j] / totals[i];
        }
    }

    // delta = M^{-1} g.
    let coef = params.p / (q as f64 - 1.0);
    let mut entries = vec![0.0f64; q * q];
    for j in 0..q {
        let col_sum: f64 = (0..q).map(|i| g[i * q + j]).sum();
        for i in 0..q {
            entries[i * q + j] = (g[i * q + j] - coef * col_sum) / params.lambda;
        }
    }
    // Clip and renormalize rows.
    for i in 0..q {
        let row = &mut entries[i * q..(i + 1) * q];
        row.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / q as f64);
        }
    }

    let matrix = ConfusionMatrix {
        q,
        entries,
        mode: ConfusionMode::Estimated,
    };
    let validation_error = matrix.to_noise_matrix().err().map(|e| e.to_string());
    Ok(NoiseEstimate {
        matrix,
        anchors: anchor_list,
        warnings,
        validation_error,
    })
}

/// Fraction of vertices on which two partitions agree after the best block
/// pairing (gamma-correctness is `1 -` this value per community).
pub fn overlap_fraction(partition: &Partition, truth: &[u8], q: usize) -> f64 {
    let n = partition.n();
    let truth_part = Partition::new(
        q,
        truth.to_vec(),
    )
    .expect("truth labels are in range");
    let alignment = align(partition, &truth_part).expect("same vertex set");
    alignment.overlap as f64 / n as f64
}

/// Worst-community gamma: `max_i (1 - |V_i cap V'_i| / (n/q))` after the
/// best pairing, the quantity the black-box guarantee speaks about.
pub fn gamma_observed(partition: &Partition, truth: &[u8], q: usize) -> Result<f64> {
    let n = partition.n();
    let truth_part = Partition::new(q, truth.to_vec())?;
    let alignment = align(partition, &truth_part)?;
    let aligned = relabel(partition, &alignment);
    let mut hit = vec![0u64; q];
    for v in 0..n {
        if aligned.block_of(v) == truth[v] {
            hit[truth[v] as usize - 1] += 1;
        }
    }
    let per = n as f64 / q as f64;
    let gamma = (0..q)
        .map(|i| 1.0 - hit[i] as f64 / per)
        .fold(0.0f64, f64::max);
    Ok(gamma.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IDENTITY_TOL, ModelParams};
    use crate::sbm::sample_sbm;

    fn strong() -> ModelParams {
        ModelParams::new(3, 50.0, 2.0).unwrap()
    }

    #[test]
    fn partition_text_round_trip() {
        let p = Partition::new(3, vec![1, 2, 3, 1, 2]).unwrap();
        let text = p.to_text();
        let back = Partition::parse_text(&text).unwrap();
        assert_eq!(p, back);
        assert!(Partition::parse_text("").is_err());
        assert!(Partition::parse_text("0 1\n0 2\n").is_err()); // duplicate
        assert!(Partition::parse_text("0 0\n").is_err()); // block 0
        assert!(Partition::parse_text("1 1\n").is_err()); // vertex 0 missing
    }

    #[test]
    fn uniformize_examples() {
        // sizes (10, 5, 3) -> (6, 6, 6), 4 moved.
        let mut assign = Vec::new();
        assign.extend(std::iter::repeat(1u8).take(10));
        assign.extend(std::iter::repeat(2u8).take(5));
        assign.extend(std::iter::repeat(3u8).take(3));
        let p = Partition::new(3, assign).unwrap();
        let u = uniformize(&p);
        assert_eq!(u.block_sizes(), &[6, 6, 6]);
        let moved = p
            .assign_slice()
            .iter()
            .zip(u.assign_slice())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(moved, 4);

        // Already balanced: unchanged.
        let b = Partition::new(3, vec![1, 2, 3, 1, 2, 3]).unwrap();
        assert_eq!(uniformize(&b), b);

        // n = 10, q = 3: sizes {4, 3, 3}.
        let p10 = Partition::new(3, vec![1; 10]).unwrap();
        let u10 = uniformize(&p10);
        let mut sizes = u10.block_sizes().to_vec();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);

        // Idempotent.
        assert_eq!(uniformize(&u), u);
        assert_eq!(uniformize(&u10), u10);
    }

    #[test]
    fn align_identity_and_cycles() {
        let p = Partition::new(3, vec![1, 1, 2, 2, 3, 3]).unwrap();
        let a = align(&p, &p).unwrap();
        assert_eq!(a.perm, vec![1, 2, 3]);

        // Partition = reference cyclically renamed: 1->2, 2->3, 3->1.
        let renamed = Partition::new(3, vec![2, 2, 3, 3, 1, 1]).unwrap();
        let a = align(&renamed, &p).unwrap();
        // Reference block i is held by partition block i+1.
        assert_eq!(a.perm, vec![2, 3, 1]);
        let back = relabel(&renamed, &a);
        assert_eq!(back, p);
    }

    #[test]
    fn confusion_exact_cases() {
        let truth = vec![1u8, 1, 2, 2, 3, 3];
        let perfect = Partition::new(3, truth.clone()).unwrap();
        let c = confusion_exact(&perfect, &truth, 3, 6);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c.entry(i, j) - want).abs() < IDENTITY_TOL);
            }
        }
        assert!(confusion_column_sums_exact(&perfect, &truth, 3, 6));

        // Swapped blocks give a permutation matrix.
        let swapped = Partition::new(3, vec![2, 2, 1, 1, 3, 3]).unwrap();
        let c = confusion_exact(&swapped, &truth, 3, 6);
        assert!((c.entry(0, 1) - 1.0).abs() < IDENTITY_TOL);
        assert!((c.entry(1, 0) - 1.0).abs() < IDENTITY_TOL);
        assert!((c.entry(2, 2) - 1.0).abs() < IDENTITY_TOL);

        // Column sums stay exactly 1 for uneven n (integer witness).
        let truth7 = vec![1u8, 1, 1, 2, 2, 3, 3];
        let part7 = uniformize(&Partition::new(3, vec![1, 1, 2, 2, 3, 3, 1]).unwrap());
        assert!(confusion_column_sums_exact(&part7, &truth7, 3, 7));
        let c7 = confusion_exact(&part7, &truth7, 3, 7);
        for j in 0..3 {
            let col: f64 = (0..3).map(|i| c7.entry(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_separates_disconnected_communities() {
        // b = 0: communities are disconnected components; gamma = 0.
        let p0 = ModelParams::new(3, 30.0, 0.0).unwrap();
        let g = sample_sbm(600, &p0, true, 9).unwrap();
        let part = spectral_partition(&g, 3, 1).unwrap();
        let gamma = gamma_observed(&part, g.sigma_slice(), 3).unwrap();
        assert!(gamma < 0.02, "gamma {gamma}");
    }

    #[test]
    fn spectral_strong_signal_quality() {
        let p = strong();
        let g = sample_sbm(1500, &p, false, 33).unwrap();
        let part = spectral_partition(&g, 3, 2).unwrap();
        let gamma = gamma_observed(&part, g.sigma_slice(), 3).unwrap();
        assert!(gamma <= 0.25, "gamma {gamma}");
        // Determinism.
        let part2 = spectral_partition(&g, 3, 2).unwrap();
        assert_eq!(part, part2);
    }

    #[test]
    fn high_degree_selection() {
        let p = strong();
        let g = sample_sbm(2500, &p, false, 5).unwrap();
        let hd = select_high_degree(&g, 3).unwrap();
        assert_eq!(hd.subset.len(), 50);
        assert!(hd.threshold >= 1);
        assert!(!hd.qualified.is_empty());
        for w in hd.qualified.windows(2) {
            assert!(g.degree(w[0] as usize) >= g.degree(w[1] as usize));
        }
        let tiny = sample_sbm(50, &ModelParams::new(3, 10.0, 1.0).unwrap(), false, 1).unwrap();
        assert!(matches!(
            select_high_degree(&tiny, 0),
            Err(Error::AnchorSampleTooSmall { .. })
        ));
    }

    #[test]
    fn noise_estimation_identity_on_truth() {
        // Ground-truth partition, strong signal, big anchors: delta ~ I.
        let p = strong();
        let g = sample_sbm(5000, &p, false, 17).unwrap();
        let truth = Partition::new(3, g.sigma_slice().to_vec()).unwrap();
        let hd = select_high_degree(&g, 7).unwrap();
        let est = estimate_noise_matrix(&g, &truth, &hd.qualified).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (est.matrix.entry(i, j) - want).abs() < 0.25,
                    "({i},{j}) = {}",
                    est.matrix.entry(i, j)
                );
            }
        }
    }

    #[test]
    fn noise_estimation_trivial_inversion() {
        // With p ~ 0 (b ~ 0), M ~ I and the inversion returns the raw
        // fractions; on the ground-truth partition those are the identity.
        let p = ModelParams::new(3, 30.0, 1e-9).unwrap();
        let g = sample_sbm(400, &p, true, 2).unwrap();
        let truth = Partition::new(3, g.sigma_slice().to_vec()).unwrap();
        let candidates: Vec<u32> = (0..400u32).collect();
        let est = estimate_noise_matrix(&g, &truth, &candidates).unwrap();
        for i in 0..3 {
            assert!(est.matrix.entry(i, i) > 0.99);
        }
        assert!(est.validation_error.is_none());
    }

    #[test]
    fn noise_estimation_detects_permuted_anchors() {
        // A partition that swaps two communities yields a permuted estimate,
        // caught by the diagonal-bound validation.
        let p = strong();
        let g = sample_sbm(3000, &p, false, 23).unwrap();
        let swapped: Vec<u8> = g
            .sigma_slice()
            .iter()
            .map(|&s| match s {
                1 => 2,
                2 => 1,
                other => other,
            })
            .collect();
        let part = Partition::new(3, swapped).unwrap();
        let hd = select_high_degree(&g, 11).unwrap();
        let est = estimate_noise_matrix(&g, &part, &hd.qualified).unwrap();
        assert!(est.validation_error.is_some());
    }

    #[test]
    fn anchor_errors() {
        let p = strong();
        let g = sample_sbm(300, &p, false, 3).unwrap();
        let truth = Partition::new(3, g.sigma_slice().to_vec()).unwrap();
        // No candidate in block 2.
        let only_block1: Vec<u32> = (0..300u32)
            .filter(|&v| truth.block_of(v as usize) == 1)
            .take(3)
            .collect();
        assert!(matches!(
            estimate_noise_matrix(&g, &truth, &only_block1),
            Err(Error::AnchorMissing { .. })
        ));
    }
}
