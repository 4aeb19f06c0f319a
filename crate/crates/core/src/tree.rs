//! Rooted broadcast trees stored as flat index arrays.
//!
//! Nodes are kept in BFS order: each level is a contiguous index range and
//! the children of consecutive nodes are consecutive, which makes the level
//! sweeps used by the posterior and majority code cache-friendly even on
//! trees with millions of nodes. Trees are immutable once labeled.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, NoiseMatrix};
use crate::rng::master_rng;

/// Default ceiling on the number of nodes a single tree may occupy.
pub const DEFAULT_NODE_BUDGET: usize = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TreeKind {
    /// Every node above the deepest level has exactly `d` children.
    Regular { d: usize },
    /// Child counts are i.i.d. Poisson with the given mean.
    GaltonWatson { mean: f64 },
}

/// A rooted tree with optional broadcast labels.
///
/// `sigma` is empty until [`broadcast_labels`] runs; operations that need
/// labels report [`Error::Unlabeled`] before then. Labels are 1-based
/// (values in `1..=q`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTree {
    kind: TreeKind,
    /// `level_start[k]..level_start[k+1]` are the nodes of level `k`.
    level_start: Vec<u32>,
    parent: Vec<u32>,
    first_child: Vec<u32>,
    child_count: Vec<u32>,
    sigma: Vec<u8>,
}

/// Noisy labels drawn on a single designated level.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabels {
    pub level: usize,
    /// One label per node of the level, in node order.
    pub tau: Vec<u8>,
}

impl LabeledTree {
    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    /// Deepest nonempty level.
    pub fn depth(&self) -> usize {
        self.level_start.len() - 2
    }

    /// Index range of the nodes of level `k`.
    pub fn level(&self, k: usize) -> Result<std::ops::Range<usize>> {
        if k > self.depth() {
            return Err(Error::LevelMissing {
                level: k,
                depth: self.depth(),
            });
        }
        Ok(self.level_start[k] as usize..self.level_start[k + 1] as usize)
    }

    pub fn level_size(&self, k: usize) -> usize {
        self.level(k).map(|r| r.len()).unwrap_or(0)
    }

    pub fn children(&self, u: usize) -> std::ops::Range<usize> {
        let s = self.first_child[u] as usize;
        s..s + self.child_count[u] as usize
    }

    pub fn parent(&self, u: usize) -> Option<usize> {
        if u == 0 {
            None
        } else {
            Some(self.parent[u] as usize)
        }
    }

    pub fn depth_of(&self, u: usize) -> usize {
        debug_assert!(u < self.node_count());
        // level_start is sorted; the level of u is the last start <= u.
        self.level_start.partition_point(|&s| s as usize <= u) - 1
    }

    pub fn is_labeled(&self) -> bool {
        !self.sigma.is_empty()
    }

    pub fn sigma(&self, u: usize) -> u8 {
        self.sigma[u]
    }

    pub fn sigma_slice(&self) -> &[u8] {
        &self.sigma
    }

    fn require_labels(&self) -> Result<()> {
        if self.is_labeled() {
            Ok(())
        } else {
            Err(Error::Unlabeled)
        }
    }
}

/// Build an (unlabeled) tree from BFS-ordered parents and level offsets.
/// Children of consecutive nodes must be contiguous, which BFS discovery
/// order guarantees.
pub(crate) fn from_bfs_parts(level_start: Vec<u32>, parent: Vec<u32>) -> LabeledTree {
    let n = parent.len();
    let mut first_child = vec![0u32; n];
    let mut child_count = vec![0u32; n];
    for u in 1..n {
        let p = parent[u] as usize;
        if child_count[p] == 0 {
            first_child[p] = u as u32;
        } else {
            debug_assert_eq!(first_child[p] + child_count[p], u as u32);
        }
        child_count[p] += 1;
    }
    // Leaves point at the next level boundary (an empty range).
    let mut depth_of = vec![0u32; n];
    for u in 1..n {
        depth_of[u] = depth_of[parent[u] as usize] + 1;
    }
    for u in 0..n {
        if child_count[u] == 0 {
            let d = depth_of[u] as usize;
            first_child[u] = *level_start.get(d + 1).unwrap_or(&(n as u32));
        }
    }
    LabeledTree {
        kind: TreeKind::GaltonWatson { mean: 0.0 },
        level_start,
        parent,
        first_child,
        child_count,
        sigma: Vec::new(),
    }
}

/// Build the deterministic `d`-regular skeleton of the given depth.
/// Node count is `sum_{k=0}^{max_depth} d^k`; the budget guards memory.
pub fn sample_regular_tree(d: usize, max_depth: usize, max_nodes: usize) -> Result<LabeledTree> {
    assert!(d >= 1, "regular trees need d >= 1");
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=max_depth {
        total += level;
        if total > max_nodes as u128 {
            return Err(Error::NodeBudget { budget: max_nodes });
        }
        level = level.saturating_mul(d as u128);
    }
    let n = total as usize;

    let mut level_start = Vec::with_capacity(max_depth + 2);
    let mut parent = Vec::with_capacity(n);
    let mut first_child = Vec::with_capacity(n);
    let mut child_count = Vec::with_capacity(n);

    level_start.push(0u32);
    parent.push(u32::MAX);
    let mut level_begin = 0usize;
    let mut level_len = 1usize;
    for k in 0..=max_depth {
        let next_begin = level_begin + level_len;
        level_start.push(next_begin as u32);
        let has_children = k < max_depth;
        for i in 0..level_len {
            let u = level_begin + i;
            if has_children {
                first_child.push((next_begin + i * d) as u32);
                child_count.push(d as u32);
                for _ in 0..d {
                    parent.push(u as u32);
                }
            } else {
                first_child.push(next_begin as u32);
                child_count.push(0);
            }
        }
        level_begin = next_begin;
        level_len *= d;
    }

    Ok(LabeledTree {
        kind: TreeKind::Regular { d },
        level_start,
        parent,
        first_child,
        child_count,
        sigma: Vec::new(),
    })
}

/// Sample a Galton-Watson skeleton: every node above `max_depth` draws an
/// i.i.d. Poisson(`d`) number of children. Reproducible given the seed;
/// the tree ends early if a level goes extinct.
pub fn sample_gw_tree(d: f64, max_depth: usize, seed: u64, max_nodes: usize) -> Result<LabeledTree> {
    assert!(d > 0.0, "Galton-Watson trees need d > 0");
    let mut rng = master_rng(seed);
    let pois = Poisson::new(d).expect("valid Poisson mean");

    let mut level_start = vec![0u32, 1u32];
    let mut parent = vec![u32::MAX];
    let mut first_child: Vec<u32> = Vec::new();
    let mut child_count: Vec<u32> = Vec::new();

    let mut level_begin = 0usize;
    let mut level_end = 1usize;
    for k in 0..=max_depth {
        let grow = k < max_depth && level_end > level_begin;
        let mut next = level_end;
        for _ in level_begin..level_end {
            let c = if grow { pois.sample(&mut rng) as usize } else { 0 };
            first_child.push(next as u32);
            child_count.push(c as u32);
            next += c;
            if next > max_nodes {
                return Err(Error::NodeBudget { budget: max_nodes });
            }
        }
        if grow {
            for u in level_begin..level_end {
                for _ in 0..child_count[u] {
                    parent.push(u as u32);
                }
            }
            if next > level_end {
                level_start.push(next as u32);
            }
        }
        level_begin = level_end;
        level_end = next;
        if level_begin == level_end {
            break;
        }
    }

    Ok(LabeledTree {
        kind: TreeKind::GaltonWatson { mean: d },
        level_start,
        parent,
        first_child,
        child_count,
        sigma: Vec::new(),
    })
}

/// Propagate labels from the root: each child keeps its parent's label with
/// probability `1-p` and otherwise flips to a uniformly random other label.
pub fn broadcast_labels(
    mut tree: LabeledTree,
    params: &ModelParams,
    root_label: u8,
    seed: u64,
) -> Result<LabeledTree> {
    let q = params.q;
    if root_label == 0 || root_label as usize > q {
        return Err(Error::BadRootLabel {
            label: root_label,
            q,
        });
    }
    let mut rng = master_rng(seed);
    let n = tree.node_count();
    let mut sigma = vec![0u8; n];
    sigma[0] = root_label;
    let keep = 1.0 - params.p;
    for u in 1..n {
        let parent_label = sigma[tree.parent[u] as usize];
        sigma[u] = draw_child_label(&mut rng, parent_label, keep, q);
    }
    tree.sigma = sigma;
    Ok(tree)
}

/// One broadcast step: keep `parent_label` w.p. `keep`, otherwise uniform
/// over the other `q-1` labels.
#[inline]
pub(crate) fn draw_child_label(rng: &mut impl Rng, parent_label: u8, keep: f64, q: usize) -> u8 {
    if rng.gen::<f64>() < keep {
        parent_label
    } else {
        let j = rng.gen_range(0..q as u32 - 1) as u8 + 1;
        if j < parent_label {
            j
        } else {
            j + 1
        }
    }
}

/// Draw a label from a cumulative distribution row (used for noise draws).
#[inline]
pub(crate) fn draw_from_row(rng: &mut impl Rng, row: &[f64]) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j as u8 + 1;
        }
    }
    row.len() as u8
}

/// Draw noisy labels on one level: each node independently passes its true
/// label through the channel row.
pub fn apply_noise(
    tree: &LabeledTree,
    level: usize,
    delta: &NoiseMatrix,
    seed: u64,
) -> Result<NoisyLabels> {
    tree.require_labels()?;
    let range = tree.level(level)?;
    let mut rng = master_rng(seed);
    let mut tau = Vec::with_capacity(range.len());
    for u in range {
        let s = tree.sigma(u) as usize - 1;
        tau.push(draw_from_row(&mut rng, delta.row(s)));
    }
    Ok(NoisyLabels { level, tau })
}

/// Dump a labeled tree as `id parent depth sigma [tau]` lines. The root's
/// parent prints as `-`; `tau` appears only on the noisy level.
pub fn write_dump(tree: &LabeledTree, noisy: Option<&NoisyLabels>) -> Result<String> {
    tree.require_labels()?;
    let mut out = String::new();
    let noisy_range = match noisy {
        Some(nl) => {
            let r = tree.level(nl.level)?;
            if r.len() != nl.tau.len() {
                return Err(Error::NoisyLevelMismatch {
                    have: nl.tau.len(),
                    want: r.len(),
                });
            }
            Some((r, nl))
        }
        None => None,
    };
    for u in 0..tree.node_count() {
        let depth = tree.depth_of(u);
        if u == 0 {
            out.push_str(&format!("0 - 0 {}", tree.sigma(0)));
        } else {
            out.push_str(&format!("{u} {} {depth} {}", tree.parent[u], tree.sigma(u)));
        }
        if let Some((range, nl)) = &noisy_range {
            if range.contains(&u) {
                out.push_str(&format!(" {}", nl.tau[u - range.start]));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse a tree dump back into a tree. The input must list nodes in BFS
/// order with contiguous children per parent (which is what [`write_dump`]
/// produces); anything else is rejected with a line-numbered error.
pub fn parse_dump(text: &str) -> Result<(LabeledTree, Option<NoisyLabels>)> {
    let mut parent: Vec<u32> = Vec::new();
    let mut depth: Vec<u32> = Vec::new();
    let mut sigma: Vec<u8> = Vec::new();
    let mut tau_entries: Vec<(usize, u8)> = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: ln + 1, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 || toks.len() > 5 {
            return Err(err(format!("expected 4 or 5 fields, got {}", toks.len())));
        }
        let id: usize = toks[0]
            .parse()
            .map_err(|_| err(format!("bad id `{}`", toks[0])))?;
        if id != parent.len() {
            return Err(err(format!("ids must be sequential; expected {}", parent.len())));
        }
        if parent.len() >= DEFAULT_NODE_BUDGET {
            return Err(Error::NodeBudget {
                budget: DEFAULT_NODE_BUDGET,
            });
        }
        let p: u32 = if toks[1] == "-" {
            if id != 0 {
                return Err(err("only the root may have parent `-`".into()));
            }
            u32::MAX
        } else {
            let p: usize = toks[1]
                .parse()
                .map_err(|_| err(format!("bad parent `{}`", toks[1])))?;
            if id == 0 {
                return Err(err("the root must have parent `-`".into()));
            }
            if p >= id {
                return Err(err(format!("parent {p} does not precede node {id}")));
            }
            p as u32
        };
        let dep: u32 = toks[2]
            .parse()
            .map_err(|_| err(format!("bad depth `{}`", toks[2])))?;
        let expected = if id == 0 { 0 } else { depth[p as usize] + 1 };
        if dep != expected {
            return Err(err(format!("depth {dep} inconsistent with parent (expected {expected})")));
        }
        if !depth.is_empty() && dep + 1 < *depth.last().unwrap() + 1 && dep < *depth.last().unwrap() {
            return Err(err("nodes must be listed in BFS (level) order".into()));
        }
        let s: u8 = toks[3]
            .parse()
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| err(format!("bad label `{}`", toks[3])))?;
        if toks.len() == 5 {
            let t: u8 = toks[4]
                .parse()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| err(format!("bad noisy label `{}`", toks[4])))?;
            tau_entries.push((id, t));
        }
        parent.push(p);
        depth.push(dep);
        sigma.push(s);
    }

    if parent.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "empty tree dump".into(),
        });
    }

    let n = parent.len();
    // Rebuild level ranges and per-parent child runs, enforcing contiguity.
    let max_depth = *depth.iter().max().unwrap() as usize;
    let mut level_start = vec![0u32; max_depth + 2];
    for &d in &depth {
        level_start[d as usize + 1] += 1;
    }
    for k in 0..=max_depth {
        level_start[k + 1] += level_start[k];
    }
    let mut first_child = vec![0u32; n];
    let mut child_count = vec![0u32; n];
    for u in 1..n {
        let p = parent[u] as usize;
        if child_count[p] == 0 {
            first_child[p] = u as u32;
        } else if first_child[p] + child_count[p] != u as u32 {
            return Err(Error::Parse {
                line: u + 1,
                msg: format!("children of {p} are not contiguous"),
            });
        }
        child_count[p] += 1;
    }
    for u in 0..n {
        if child_count[u] == 0 {
            first_child[u] = level_start[depth[u] as usize + 1];
        }
    }

    let noisy = if tau_entries.is_empty() {
        None
    } else {
        let lvl = depth[tau_entries[0].0] as usize;
        let range = level_start[lvl] as usize..level_start[lvl + 1] as usize;
        if tau_entries.len() != range.len()
            || !tau_entries
                .iter()
                .zip(range.clone())
                .all(|(&(id, _), want)| id == want)
        {
            return Err(Error::Parse {
                line: 0,
                msg: "noisy labels must cover exactly one full level".into(),
            });
        }
        Some(NoisyLabels {
            level: lvl,
            tau: tau_entries.into_iter().map(|(_, t)| t).collect(),
        })
    };

    // Recover the kind from the structure: constant branching means regular.
    let interior: Vec<u32> = (0..n)
        .filter(|&u| (depth[u] as usize) < max_depth)
        .map(|u| child_count[u])
        .collect();
    let kind = match interior.first() {
        Some(&c) if interior.iter().all(|&x| x == c) && c > 0 => TreeKind::Regular { d: c as usize },
        _ => {
            let mean = if interior.is_empty() {
                0.0
            } else {
                interior.iter().map(|&c| c as f64).sum::<f64>() / interior.len() as f64
            };
            TreeKind::GaltonWatson { mean }
        }
    };

    Ok((
        LabeledTree {
            kind,
            level_start,
            parent,
            first_child,
            child_count,
            sigma,
        },
        noisy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    #[test]
    fn regular_tree_counts() {
        let t = sample_regular_tree(2, 2, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(t.node_count(), 7);
        assert_eq!(t.depth(), 2);
        let t = sample_regular_tree(7, 3, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(t.node_count(), 400);
        assert_eq!(t.level(3).unwrap().len(), 343);
        // Structure: parents and children agree.
        for u in 0..t.node_count() {
            for c in t.children(u) {
                assert_eq!(t.parent(c), Some(u));
                assert_eq!(t.depth_of(c), t.depth_of(u) + 1);
            }
        }
    }

    #[test]
    fn regular_tree_budget() {
        // 10^9 leaves exceed the default budget.
        assert!(matches!(
            sample_regular_tree(10, 9, DEFAULT_NODE_BUDGET),
            Err(Error::NodeBudget { .. })
        ));
        // Small budget trips early.
        assert!(sample_regular_tree(2, 10, 100).is_err());
    }

    #[test]
    fn gw_tree_deterministic_and_bounded() {
        let a = sample_gw_tree(2.5, 6, 99, DEFAULT_NODE_BUDGET).unwrap();
        let b = sample_gw_tree(2.5, 6, 99, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(a, b);
        let c = sample_gw_tree(2.5, 6, 100, DEFAULT_NODE_BUDGET).unwrap();
        assert!(a != c || a.node_count() == 1);
        for u in 0..a.node_count() {
            for ch in a.children(u) {
                assert_eq!(a.parent(ch), Some(u));
            }
        }
        assert!(sample_gw_tree(5.0, 30, 4242, 1000).is_err());
    }

    #[test]
    fn broadcast_noiseless_copies_root() {
        let params = ModelParams::new(4, 20.0, 0.0).unwrap(); // p = 0
        let t = sample_regular_tree(3, 4, DEFAULT_NODE_BUDGET).unwrap();
        let t = broadcast_labels(t, &params, 2, 7).unwrap();
        assert!(t.sigma_slice().iter().all(|&s| s == 2));
    }

    #[test]
    fn broadcast_rejects_bad_root() {
        let params = ModelParams::new(3, 15.0, 3.0).unwrap();
        let t = sample_regular_tree(2, 1, DEFAULT_NODE_BUDGET).unwrap();
        assert!(matches!(
            broadcast_labels(t.clone(), &params, 0, 1),
            Err(Error::BadRootLabel { .. })
        ));
        assert!(broadcast_labels(t, &params, 4, 1).is_err());
    }

    #[test]
    fn noise_identity_and_permutation() {
        let params = ModelParams::new(3, 15.0, 3.0).unwrap();
        let t = sample_regular_tree(3, 3, DEFAULT_NODE_BUDGET).unwrap();
        let t = broadcast_labels(t, &params, 1, 11).unwrap();

        let id = NoiseMatrix::identity(3);
        let nl = apply_noise(&t, 3, &id, 5).unwrap();
        let range = t.level(3).unwrap();
        for (off, u) in range.clone().enumerate() {
            assert_eq!(nl.tau[off], t.sigma(u));
        }

        // A permutation channel relabels deterministically. A cyclic
        // permutation has zero diagonal so it is not an admissible channel,
        // but draw_from_row works for any row-stochastic matrix; build the
        // permutation matrix directly.
        let perm = NoiseMatrix::validate(
            3,
            &[
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
            ],
        );
        // Rejected as a channel (diagonal bound), which is the documented
        // behavior; exercise the raw draw instead.
        assert!(perm.is_err());
        let mut rng = master_rng(0);
        assert_eq!(draw_from_row(&mut rng, &[0.0, 1.0, 0.0]), 2);
    }

    #[test]
    fn apply_noise_requires_level_and_labels() {
        let params = ModelParams::new(3, 15.0, 3.0).unwrap();
        let skel = sample_regular_tree(2, 2, DEFAULT_NODE_BUDGET).unwrap();
        let id = NoiseMatrix::identity(3);
        assert!(matches!(
            apply_noise(&skel, 1, &id, 0),
            Err(Error::Unlabeled)
        ));
        let t = broadcast_labels(skel, &params, 1, 3).unwrap();
        assert!(matches!(
            apply_noise(&t, 5, &id, 0),
            Err(Error::LevelMissing { .. })
        ));
    }

    #[test]
    fn dump_round_trip() {
        let params = ModelParams::new(3, 15.0, 3.0).unwrap();
        let t = sample_regular_tree(2, 3, DEFAULT_NODE_BUDGET).unwrap();
        let t = broadcast_labels(t, &params, 1, 21).unwrap();
        let delta = NoiseMatrix::uniform_diag(3, 0.8).unwrap();
        let nl = apply_noise(&t, 2, &delta, 9).unwrap();

        let text = write_dump(&t, Some(&nl)).unwrap();
        let (t2, nl2) = parse_dump(&text).unwrap();
        assert_eq!(t, t2);
        assert_eq!(Some(nl), nl2);

        let gw = sample_gw_tree(1.8, 4, 17, DEFAULT_NODE_BUDGET).unwrap();
        let gw = broadcast_labels(gw, &params, 2, 3).unwrap();
        let text = write_dump(&gw, None).unwrap();
        let (gw2, none) = parse_dump(&text).unwrap();
        assert_eq!(gw.node_count(), gw2.node_count());
        assert_eq!(gw.sigma_slice(), gw2.sigma_slice());
        assert!(none.is_none());
    }

    #[test]
    fn dump_parser_rejects_malformed() {
        assert!(parse_dump("").is_err());
        assert!(parse_dump("0 - 0 1\n2 0 1 1").is_err()); // non-sequential id
        assert!(parse_dump("0 0 0 1").is_err()); // root with a parent
        assert!(parse_dump("0 - 0 1\n1 0 2 1").is_err()); // bad depth
        assert!(parse_dump("0 - 0 0").is_err()); // label 0
        assert!(parse_dump("0 - 0 1\n1 0 1 1 2 3").is_err()); // too many fields
    }
}
