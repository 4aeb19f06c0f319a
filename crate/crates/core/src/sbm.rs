//! Sparse stochastic block model graphs: sampling, neighborhood balls, the
//! coupling radius, and tree-coupling diagnostics.
//!
//! Edge sampling is O(n(a+b)) expected: per community pair the edge count is
//! drawn binomially and that many distinct pairs are placed uniformly, which
//! is distribution-identical to the independent per-pair sweep.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::master_rng;

/// An undirected simple graph with ground-truth community labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmGraph {
    pub params: ModelParams,
    pub n: usize,
    pub seed: u64,
    pub balanced: bool,
    /// CSR adjacency: neighbors of `v` are `adj[offsets[v]..offsets[v+1]]`, sorted.
    offsets: Vec<usize>,
    adj: Vec<u32>,
    /// 1-based community labels.
    sigma: Vec<u8>,
}

impl SbmGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.adj[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.len() / 2
    }

    pub fn sigma(&self, v: usize) -> u8 {
        self.sigma[v]
    }

    pub fn sigma_slice(&self) -> &[u8] {
        &self.sigma
    }

    /// Community member lists, 1-based labels.
    pub fn community_members(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.params.q];
        for (v, &s) in self.sigma.iter().enumerate() {
            out[s as usize - 1].push(v as u32);
        }
        out
    }

    pub(crate) fn from_edges(
        params: ModelParams,
        n: usize,
        seed: u64,
        balanced: bool,
        sigma: Vec<u8>,
        edges: &[(u32, u32)],
    ) -> Result<Self> {
        let mut deg = vec![0usize; n];
        for &(u, v) in edges {
            if u as usize >= n || v as usize >= n {
                return Err(Error::VertexOutOfRange {
                    v: u.max(v) as usize,
                    n,
                });
            }
            if u == v {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("self-loop at vertex {u}"),
                });
            }
            deg[u as usize] += 1;
            deg[v as usize] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + deg[v];
        }
        let mut adj = vec![0u32; offsets[n]];
        let mut cursor = offsets.clone();
        for &(u, v) in edges {
            adj[cursor[u as usize]] = v;
            cursor[u as usize] += 1;
            adj[cursor[v as usize]] = u;
            cursor[v as usize] += 1;
        }
        for v in 0..n {
            let slice = &mut adj[offsets[v]..offsets[v + 1]];
            slice.sort_unstable();
            if slice.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("duplicate edge at vertex {v}"),
                });
            }
        }
        Ok(SbmGraph {
            params,
            n,
            seed,
            balanced,
            offsets,
            adj,
            sigma,
        })
    }
}

/// Sample a graph: communities i.i.d. uniform (or an exactly even random
/// partition when `balanced`), then edges with probability `a/n` within and
/// `b/n` across communities.
pub fn sample_sbm(
    n: usize,
    params: &ModelParams,
    balanced: bool,
    seed: u64,
) -> Result<SbmGraph> {
    let q = params.q;
    if n < q {
        return Err(Error::GraphTooSmall { n, q });
    }
    if params.a > n as f64 || params.b > n as f64 {
        let rate = params.a.max(params.b);
        return Err(Error::EdgeProbability { rate, n });
    }
    let mut rng = master_rng(seed);

    let sigma: Vec<u8> = if balanced {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng);
        let mut sigma = vec![0u8; n];
        for (i, &v) in order.iter().enumerate() {
            sigma[v as usize] = (i % q) as u8 + 1;
        }
        sigma
    } else {
        (0..n).map(|_| rng.gen_range(0..q as u32) as u8 + 1).collect()
    };

    let mut members = vec![Vec::new(); q];
    for (v, &s) in sigma.iter().enumerate() {
        members[s as usize - 1].push(v as u32);
    }

    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut chosen: HashSet<(u32, u32)> = HashSet::new();
    for i in 0..q {
        for j in i..q {
            let (pairs, rate) = if i == j {
                let m = members[i].len() as u64;
                (m * m.saturating_sub(1) / 2, params.a / n as f64)
            } else {
                (
                    members[i].len() as u64 * members[j].len() as u64,
                    params.b / n as f64,
                )
            };
            if pairs == 0 || rate <= 0.0 {
                continue;
            }
            let count = if rate >= 1.0 {
                pairs
            } else {
                Binomial::new(pairs, rate).unwrap().sample(&mut rng)
            };
            chosen.clear();
            while (chosen.len() as u64) < count {
                let u = *members[i].choose(&mut rng).unwrap();
                let v = *members[j].choose(&mut rng).unwrap();
                if u == v {
                    continue;
                }
                let key = (u.min(v), u.max(v));
                if chosen.insert(key) {
                    edges.push(key);
                }
            }
        }
    }

    SbmGraph::from_edges(*params, n, seed, balanced, sigma, &edges)
}

/// The coupling radius `floor(ln n / (10 ln(2(a+b))))`; needs `2(a+b) > 1`.
pub fn coupling_radius(n: usize, a: f64, b: f64) -> Result<usize> {
    let base = 2.0 * (a + b);
    if base <= 1.0 {
        return Err(Error::CouplingRadiusUndefined { value: base });
    }
    Ok(((n as f64).ln() / (10.0 * base.ln())).floor() as usize)
}

/// A BFS neighborhood of a vertex.
#[derive(Debug, Clone, Serialize)]
pub struct BallView {
    pub center: u32,
    pub radius: usize,
    /// Nodes in BFS order.
    pub nodes: Vec<u32>,
    /// `level_start[k]..level_start[k+1]` indexes `nodes` at distance `k`.
    pub level_start: Vec<usize>,
    /// BFS discovery parent of each node (position into `nodes`);
    /// `u32::MAX` for the center.
    pub parent: Vec<u32>,
    /// Induced edges among ball nodes (each listed once).
    pub edges: Vec<(u32, u32)>,
    pub is_tree: bool,
}

impl BallView {
    /// Nodes at exactly the ball radius.
    pub fn boundary(&self) -> &[u32] {
        let k = self.level_start.len() - 2;
        &self.nodes[self.level_start[k]..self.level_start[k + 1]]
    }

    pub fn depth(&self) -> usize {
        self.level_start.len() - 2
    }
}

/// BFS ball of radius `r` around `v`, with induced edge count and tree flag.
pub fn ball(graph: &SbmGraph, v: usize, r: usize) -> Result<BallView> {
    if v >= graph.n {
        return Err(Error::VertexOutOfRange { v, n: graph.n });
    }
    let mut dist = vec![u32::MAX; graph.n];
    let mut nodes = vec![v as u32];
    let mut parent = vec![u32::MAX];
    let mut level_start = vec![0usize, 1];
    dist[v] = 0;
    let mut frontier_begin = 0usize;
    for depth in 0..r {
        let frontier_end = nodes.len();
        for idx in frontier_begin..frontier_end {
            let u = nodes[idx] as usize;
            for &w in graph.neighbors(u) {
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = depth as u32 + 1;
                    nodes.push(w);
                    parent.push(idx as u32);
                }
            }
        }
        if nodes.len() == frontier_end {
            break;
        }
        level_start.push(nodes.len());
        frontier_begin = frontier_end;
    }

    let mut edges = Vec::new();
    for &u in &nodes {
        for &w in graph.neighbors(u as usize) {
            if u < w && dist[w as usize] != u32::MAX {
                edges.push((u, w));
            }
        }
    }
    let is_tree = edges.len() == nodes.len() - 1;
    Ok(BallView {
        center: v as u32,
        radius: r,
        nodes,
        level_start,
        parent,
        edges,
        is_tree,
    })
}

/// Coupling diagnostics over a set of ball centers.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingReport {
    pub centers: usize,
    pub radius: usize,
    /// Fraction of centers whose ball is a tree.
    pub tree_fraction: f64,
    /// Total variation between the pooled child-count distribution inside
    /// balls and Poisson(d).
    pub tv_child_total: f64,
    /// Same for the same-community child counts vs Poisson(a/q).
    pub tv_child_same: f64,
    /// Same for each specific other community vs Poisson(b/q).
    pub tv_child_other: f64,
    /// `max_i | |V^i| - n/q |`.
    pub balance_max_dev: f64,
    /// The reference scale `n^{3/4}` for the balance deviation.
    pub balance_bound: f64,
    /// Pooled child-count histogram (index = count).
    pub child_histogram: Vec<u64>,
}

fn tv_against_poisson(hist: &[u64], mean: f64) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut tv = 0.0;
    let mut pois_mass = 0.0;
    let mut pmf = (-mean).exp();
    for (k, &h) in hist.iter().enumerate() {
        if k > 0 {
            pmf *= mean / k as f64;
        }
        tv += (h as f64 / total as f64 - pmf).abs();
        pois_mass += pmf;
    }
    // Mass of the Poisson beyond the histogram range.
    tv += (1.0 - pois_mass).max(0.0);
    tv / 2.0
}

/// Measure how tree-like and Poisson-like the `r`-balls around the given
/// centers are, and how balanced the communities came out.
pub fn coupling_diagnostic(graph: &SbmGraph, centers: &[u32], r: usize) -> Result<CouplingReport> {
    assert!(r >= 1, "coupling diagnostics need a positive radius");
    let q = graph.params.q;
    let mut tree_hits = 0usize;
    let mut hist_total: Vec<u64> = Vec::new();
    let mut hist_same: Vec<u64> = Vec::new();
    let mut hist_other: Vec<u64> = Vec::new();
    let bump = |hist: &mut Vec<u64>, k: usize| {
        if hist.len() <= k {
            hist.resize(k + 1, 0);
        }
        hist[k] += 1;
    };

    for &c in centers {
        let b = ball(graph, c as usize, r)?;
        if b.is_tree {
            tree_hits += 1;
        }
        // Forward-degree of nodes strictly inside the ball: neighbors one
        // level further out.
        let mut level_of = std::collections::HashMap::new();
        for (k, win) in b.level_start.windows(2).enumerate() {
            for &u in &b.nodes[win[0]..win[1]] {
                level_of.insert(u, k);
            }
        }
        let inner_levels = b.level_start.len() - 2;
        for k in 0..inner_levels {
            for &u in &b.nodes[b.level_start[k]..b.level_start[k + 1]] {
                let su = graph.sigma(u as usize);
                let mut total = 0usize;
                let mut same = 0usize;
                let mut per_label = vec![0usize; q];
                for &w in graph.neighbors(u as usize) {
                    if level_of.get(&w) == Some(&(k + 1)) {
                        total += 1;
                        let sw = graph.sigma(w as usize);
                        per_label[sw as usize - 1] += 1;
                        if sw == su {
                            same += 1;
                        }
                    }
                }
                bump(&mut hist_total, total);
                bump(&mut hist_same, same);
                for (lbl, &cnt) in per_label.iter().enumerate() {
                    if lbl != su as usize - 1 {
                        bump(&mut hist_other, cnt);
                    }
                }
            }
        }
    }

    let qf = q as f64;
    let mut balance_max_dev = 0.0f64;
    let members = graph.community_members();
    for m in &members {
        balance_max_dev = balance_max_dev.max((m.len() as f64 - graph.n as f64 / qf).abs());
    }

    Ok(CouplingReport {
        centers: centers.len(),
        radius: r,
        tree_fraction: tree_hits as f64 / centers.len().max(1) as f64,
        tv_child_total: tv_against_poisson(&hist_total, graph.params.d),
        tv_child_same: tv_against_poisson(&hist_same, graph.params.a / qf),
        tv_child_other: tv_against_poisson(&hist_other, graph.params.b / qf),
        balance_max_dev,
        balance_bound: (graph.n as f64).powf(0.75),
        child_histogram: hist_total,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Write the edge list: header `n q a b seed`, then one `u v` line per edge.
pub fn write_graph<W: Write>(graph: &SbmGraph, mut w: W) -> Result<()> {
    writeln!(
        w,
        "{} {} {} {} {}",
        graph.n, graph.params.q, graph.params.a, graph.params.b, graph.seed
    )?;
    for v in 0..graph.n {
        for &u in graph.neighbors(v) {
            if (v as u32) < u {
                writeln!(w, "{} {}", v, u)?;
            }
        }
    }
    Ok(())
}

/// Write the labels sidecar: one `v sigma` line per vertex.
pub fn write_labels<W: Write>(graph: &SbmGraph, mut w: W) -> Result<()> {
    for v in 0..graph.n {
        writeln!(w, "{} {}", v, graph.sigma(v))?;
    }
    Ok(())
}

/// Load a graph from the edge-list format plus its labels sidecar,
/// validating simplicity, vertex ranges, and label completeness.
pub fn load_graph<R: BufRead, R2: BufRead>(edges_in: R, labels_in: R2) -> Result<SbmGraph> {
    let mut lines = edges_in.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((ln, line)) => {
                let line = line?;
                let t = line.trim();
                if t.is_empty() || t.starts_with('#') {
                    continue;
                }
                break (ln + 1, t.to_string());
            }
            None => {
                return Err(Error::Parse {
                    line: 0,
                    msg: "empty graph file".into(),
                })
            }
        }
    };
    let toks: Vec<&str> = header.1.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(Error::Parse {
            line: header.0,
            msg: format!("header needs `n q a b seed`, got {} fields", toks.len()),
        });
    }
    let n: usize = toks[0].parse().map_err(|_| Error::Parse {
        line: header.0,
        msg: format!("bad n `{}`", toks[0]),
    })?;
    let q: usize = toks[1].parse().map_err(|_| Error::Parse {
        line: header.0,
        msg: format!("bad q `{}`", toks[1]),
    })?;
    let a: f64 = toks[2].parse().map_err(|_| Error::Parse {
        line: header.0,
        msg: format!("bad a `{}`", toks[2]),
    })?;
    let b: f64 = toks[3].parse().map_err(|_| Error::Parse {
        line: header.0,
        msg: format!("bad b `{}`", toks[3]),
    })?;
    let seed: u64 = toks[4].parse().map_err(|_| Error::Parse {
        line: header.0,
        msg: format!("bad seed `{}`", toks[4]),
    })?;
    let params = ModelParams::new(q, a, b)?;
    if n < q {
        return Err(Error::GraphTooSmall { n, q });
    }
    // Memory guard: a hostile header cannot force a huge allocation unless
    // the edge list itself is equally large.
    if n > 1 << 28 {
        return Err(Error::Parse {
            line: header.0,
            msg: format!("vertex count {n} exceeds the supported maximum"),
        });
    }

    let mut edges = Vec::new();
    for (ln, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut it = t.split_whitespace();
        let parse_v = |tok: Option<&str>| -> Result<u32> {
            let tok = tok.ok_or(Error::Parse {
                line: ln + 1,
                msg: "expected `u v`".into(),
            })?;
            let v: usize = tok.parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad vertex `{tok}`"),
            })?;
            if v >= n {
                return Err(Error::VertexOutOfRange { v, n });
            }
            Ok(v as u32)
        };
        let u = parse_v(it.next())?;
        let v = parse_v(it.next())?;
        if it.next().is_some() {
            return Err(Error::Parse {
                line: ln + 1,
                msg: "expected exactly two fields".into(),
            });
        }
        if u == v {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("self-loop at vertex {u}"),
            });
        }
        edges.push((u.min(v), u.max(v)));
    }

    let mut sigma = vec![0u8; n];
    let mut seen = vec![false; n];
    for (ln, line) in labels_in.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::Parse {
                line: ln + 1,
                msg: "labels need `v sigma`".into(),
            });
        }
        let v: usize = toks[0].parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: format!("bad vertex `{}`", toks[0]),
        })?;
        if v >= n {
            return Err(Error::VertexOutOfRange { v, n });
        }
        let s: usize = toks[1].parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: format!("bad label `{}`", toks[1]),
        })?;
        if s == 0 || s > q {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("label {s} outside 1..={q}"),
            });
        }
        if seen[v] {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("duplicate label for vertex {v}"),
            });
        }
        seen[v] = true;
        sigma[v] = s as u8;
    }
    if let Some(v) = seen.iter().position(|&s| !s) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("vertex {v} has no label"),
        });
    }

    SbmGraph::from_edges(params, n, seed, false, sigma, &edges)
}


#[cfg(test)]
mod probes {
    use super::*;

    #[test]
    #[ignore]
    fn probe_tree_fraction_at_criterion_params() {
        let p = ModelParams::new(3, 50.0, 2.0).unwrap();
        let g = sample_sbm(3000, &p, false, 1).unwrap();
        let centers: Vec<u32> = (0..200).collect();
        for r in 1..=2 {
            let rep = coupling_diagnostic(&g, &centers, r).unwrap();
            println!(
                "R={r}: tree_fraction={:.3} tv_total={:.4} tv_same={:.4} tv_other={:.4} balance={:.1}/{:.1}",
                rep.tree_fraction, rep.tv_child_total, rep.tv_child_same, rep.tv_child_other,
                rep.balance_max_dev, rep.balance_bound
            );
        }
    }
}
