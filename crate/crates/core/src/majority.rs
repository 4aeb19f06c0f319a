//! Level-count statistics and majority estimators, together with their
//! closed-form means and variance bounds used as analytic oracles.
//!
//! All root-conditioned quantities fix the root label to 1; community
//! symmetry makes that lossless. Counts are of level-`k` labels: `z` counts
//! label 1 and `y[i-2]` counts label `i` for `i = 2..q`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelParams, NoiseMatrix};
use crate::rng::{derive_seed, stream_rng};
use crate::sampling::{ChildCountSampler, Offspring};
use crate::tree::{draw_child_label, draw_from_row, LabeledTree, NoisyLabels, DEFAULT_NODE_BUDGET};

/// Tree regime for moment formulas and simulation harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    Regular,
    GaltonWatson,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Regular => "regular",
            Regime::GaltonWatson => "gw",
        }
    }

    pub(crate) fn offspring(&self, params: &ModelParams) -> Offspring {
        match self {
            Regime::Regular => Offspring::regular(params.d.round() as usize),
            Regime::GaltonWatson => Offspring::galton_watson(params.d),
        }
    }
}

/// Label counts on one tree level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LevelCounts {
    /// Count of label 1.
    pub z: u64,
    /// Counts of labels `2..=q`.
    pub y: Vec<u64>,
    /// Number of nodes on the level.
    pub total: u64,
    /// Whether the counts are of noisy labels.
    pub noisy: bool,
}

/// Exact counts on level `k`; pass the noisy labels to count those instead.
pub fn level_counts(
    tree: &LabeledTree,
    k: usize,
    noisy: Option<&NoisyLabels>,
) -> Result<LevelCounts> {
    if !tree.is_labeled() {
        return Err(Error::Unlabeled);
    }
    let range = tree.level(k)?;
    let mut z = 0u64;
    let mut rest: Vec<u64> = Vec::new();
    let mut count = |label: u8, rest: &mut Vec<u64>| {
        if label == 1 {
            z += 1;
        } else {
            let idx = label as usize - 2;
            if rest.len() <= idx {
                rest.resize(idx + 1, 0);
            }
            rest[idx] += 1;
        }
    };
    let total = range.len() as u64;
    match noisy {
        Some(nl) => {
            if nl.level != k {
                return Err(Error::NoisyLevelMismatch {
                    have: nl.level,
                    want: k,
                });
            }
            for &t in &nl.tau {
                count(t, &mut rest);
            }
        }
        None => {
            for u in range {
                count(tree.sigma(u), &mut rest);
            }
        }
    }
    Ok(LevelCounts {
        z,
        y: rest,
        total,
        noisy: noisy.is_some(),
    })
}

/// The most frequent label; ties break to the lowest label index.
pub fn majority_estimate(counts: &LevelCounts) -> u8 {
    let mut best_label = 1u8;
    let mut best = counts.z;
    for (i, &c) in counts.y.iter().enumerate() {
        if c > best {
            best = c;
            best_label = i as u8 + 2;
        }
    }
    best_label
}

/// `E[S_v]` for a node at depth `k`: `(2 - 2/q) lambda^k + 2/q - 1`,
/// where `S_v = 2*1(sigma_v = 1) - 1` given a root labeled 1.
pub fn expected_s(params: &ModelParams, k: usize) -> f64 {
    let q = params.q as f64;
    (2.0 - 2.0 / q) * params.lambda.powi(k as i32) + 2.0 / q - 1.0
}

/// Closed-form means of the level-`k` counts:
/// `E[Z] = (1 - 1/q)(lambda d)^k + d^k/q` and `E[Y] = -(lambda d)^k/q + d^k/q`.
pub fn expected_counts(params: &ModelParams, k: usize) -> (f64, f64) {
    let q = params.q as f64;
    let ld = (params.lambda * params.d).powi(k as i32);
    let dk = params.d.powi(k as i32);
    ((1.0 - 1.0 / q) * ld + dk / q, -ld / q + dk / q)
}

/// The variance-recursion constant `R`.
///
/// Regular trees: `R = p (2 - p - p/(q-1))`. Galton-Watson trees pick up the
/// offspring-count variance, adding `lambda^2 (q-1)/q`.
pub fn r_constant(params: &ModelParams, regime: Regime) -> f64 {
    let q = params.q as f64;
    let p = params.p;
    let base = p * (2.0 - p - p / (q - 1.0));
    match regime {
        Regime::Regular => base,
        Regime::GaltonWatson => base + params.lambda * params.lambda * (q - 1.0) / q,
    }
}

/// Variance bound report for the level-`k` counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub mean_z: f64,
    pub mean_y: f64,
    pub var_bound: f64,
    pub regime: Regime,
    pub r_constant: f64,
}

/// `Var(Z_k), Var(Y_k) < R d^k ((lambda^2 d)^k - 1)/(lambda^2 d - 1)`.
///
/// Errors at `snr = 1`, where the geometric sum collapses; use
/// [`variance_bound_critical`] there.
pub fn variance_bound(params: &ModelParams, k: usize, regime: Regime) -> Result<MomentReport> {
    if (params.snr - 1.0).abs() < 1e-12 {
        return Err(Error::CriticalSnr);
    }
    let r = r_constant(params, regime);
    let dk = params.d.powi(k as i32);
    let bound = r * dk * (params.snr.powi(k as i32) - 1.0) / (params.snr - 1.0);
    let (mean_z, mean_y) = expected_counts(params, k);
    Ok(MomentReport {
        mean_z,
        mean_y,
        var_bound: bound,
        regime,
        r_constant: r,
    })
}

/// The `snr = 1` limit of [`variance_bound`]: `k R d^k`.
pub fn variance_bound_critical(params: &ModelParams, k: usize, regime: Regime) -> MomentReport {
    let r = r_constant(params, regime);
    let (mean_z, mean_y) = expected_counts(params, k);
    MomentReport {
        mean_z,
        mean_y,
        var_bound: k as f64 * r * params.d.powi(k as i32),
        regime,
        r_constant: r,
    }
}

/// Means of the noisy level-`k` counts: the count of observed label `j` has
/// mean `(delta[1][j] - 1/q)(lambda d)^k + d^k/q`.
///
/// With an identity channel this reduces entry-for-entry to
/// [`expected_counts`], which pins down the form: the leading factor must be
/// the channel entry minus `1/q`, scaled by `(lambda d)^k` (unit column sums
/// make the mean of all counts sum to `d^k`). Returns `(mean_z, mean_y)` with
/// `mean_y[i-2]` the mean count of label `i`.
pub fn noisy_expected_counts(
    params: &ModelParams,
    delta: &NoiseMatrix,
    k: usize,
) -> (f64, Vec<f64>) {
    let q = params.q as f64;
    let ld = (params.lambda * params.d).powi(k as i32);
    let dk = params.d.powi(k as i32);
    let mean = |j: usize| (delta.entry(0, j) - 1.0 / q) * ld + dk / q;
    (mean(0), (1..params.q).map(mean).collect())
}

/// Recursion scheme for the iterated majority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IterationScheme {
    /// Majority-of-majorities at every level down to the leaves.
    Full,
    /// Each root child is guessed by the simple majority of its own
    /// level-`k` leaves; the root takes the majority of those guesses.
    TwoLevel,
}

fn argmax_votes(votes: &[u64]) -> Option<u8> {
    let mut best = 0u64;
    let mut label = None;
    for (i, &v) in votes.iter().enumerate() {
        if v > best {
            best = v;
            label = Some(i as u8 + 1);
        }
    }
    label
}

/// Iterated majority estimate of the root from level-`k` labels
/// (noisy labels if given). Nodes whose subtree dies before level `k`
/// abstain; an abstaining root falls back to label 1.
pub fn iterated_majority_estimate(
    tree: &LabeledTree,
    k: usize,
    noisy: Option<&NoisyLabels>,
    scheme: IterationScheme,
) -> Result<u8> {
    if !tree.is_labeled() {
        return Err(Error::Unlabeled);
    }
    let leaf_range = tree.level(k)?;
    if let Some(nl) = noisy {
        if nl.level != k {
            return Err(Error::NoisyLevelMismatch {
                have: nl.level,
                want: k,
            });
        }
    }
    if k == 0 {
        return Ok(tree.sigma(0));
    }
    let q = tree
        .sigma_slice()
        .iter()
        .map(|&s| s as usize)
        .max()
        .unwrap_or(1);

    let leaf_label = |u: usize| -> u8 {
        match noisy {
            Some(nl) => nl.tau[u - leaf_range.start],
            None => tree.sigma(u),
        }
    };

    match scheme {
        IterationScheme::Full => {
            // 0 = abstain.
            let mut est = vec![0u8; tree.node_count()];
            for u in leaf_range.clone() {
                est[u] = leaf_label(u);
            }
            let mut votes = vec![0u64; q];
            for j in (0..k).rev() {
                for u in tree.level(j)? {
                    votes.iter_mut().for_each(|v| *v = 0);
                    for c in tree.children(u) {
                        if est[c] > 0 {
                            votes[est[c] as usize - 1] += 1;
                        }
                    }
                    est[u] = argmax_votes(&votes).unwrap_or(0);
                }
            }
            Ok(if est[0] == 0 { 1 } else { est[0] })
        }
        IterationScheme::TwoLevel => {
            if k == 1 {
                // Definitional: the two schemes coincide at depth 1.
                return iterated_majority_estimate(tree, k, noisy, IterationScheme::Full);
            }
            // Which root child each node descends from.
            let first = tree.level(1)?;
            let slots = first.len();
            let mut anc = vec![u32::MAX; tree.node_count()];
            for (i, u) in first.clone().enumerate() {
                anc[u] = i as u32;
            }
            for j in 2..=k {
                for u in tree.level(j)? {
                    anc[u] = anc[tree.parent(u).unwrap()];
                }
            }
            let mut counts = vec![0u64; slots * q];
            for u in leaf_range.clone() {
                let slot = anc[u];
                if slot != u32::MAX {
                    counts[slot as usize * q + leaf_label(u) as usize - 1] += 1;
                }
            }
            let mut votes = vec![0u64; q];
            for s in 0..slots {
                if let Some(e) = argmax_votes(&counts[s * q..(s + 1) * q]) {
                    votes[e as usize - 1] += 1;
                }
            }
            Ok(argmax_votes(&votes).unwrap_or(1))
        }
    }
}

/// Stationary point of the iterated-majority recursion,
/// `E* = 1 - (1-lambda)(q-1) / (q (0.16 d - lambda))`.
///
/// Meaningful in the strong-signal, lambda-near-1 regime; errors when
/// `0.16 d <= lambda` (the recursion's denominator loses its sign).
pub fn iterated_majority_fixed_point(params: &ModelParams) -> Result<f64> {
    let denom = 0.16 * params.d - params.lambda;
    if denom <= 0.0 {
        return Err(Error::FixedPointVacuous {
            d: params.d,
            lambda: params.lambda,
        });
    }
    let q = params.q as f64;
    Ok(1.0 - (1.0 - params.lambda) * (q - 1.0) / (q * denom))
}

// ---------------------------------------------------------------------------
// Monte Carlo engine
// ---------------------------------------------------------------------------

/// Per-trial outcome of the majority simulation.
#[derive(Debug, Clone)]
pub struct MajorityTrial {
    pub trial: u64,
    pub seed: u64,
    /// Label counts per level `0..=k` (index by level), length-q vectors.
    pub sigma_counts: Vec<Vec<u64>>,
    /// Noisy-label counts per level `1..=k` (index 0 unused), when a channel is set.
    pub tau_counts: Option<Vec<Vec<u64>>>,
    pub majority: Option<u8>,
    pub iterated: Option<u8>,
    pub two_level: Option<u8>,
    pub noisy_majority: Option<u8>,
    pub noisy_iterated: Option<u8>,
}

impl MajorityTrial {
    pub fn majority_correct(&self) -> bool {
        self.majority == Some(1)
    }
    pub fn iterated_correct(&self) -> bool {
        self.iterated == Some(1)
    }
}

pub struct MajoritySimConfig {
    pub params: ModelParams,
    pub regime: Regime,
    pub k: usize,
    pub delta: Option<NoiseMatrix>,
    pub trials: usize,
    pub seed: u64,
    pub node_budget: usize,
}

impl MajoritySimConfig {
    pub fn new(
        params: ModelParams,
        regime: Regime,
        k: usize,
        delta: Option<NoiseMatrix>,
        trials: usize,
        seed: u64,
    ) -> Self {
        MajoritySimConfig {
            params,
            regime,
            k,
            delta,
            trials,
            seed,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }
}

struct SimEngine<'a> {
    cfg: &'a MajoritySimConfig,
    bottom: ChildCountSampler,
    offspring: Offspring,
}

struct TrialState {
    q: usize,
    sigma_counts: Vec<Vec<u64>>,
    tau_counts: Vec<Vec<u64>>,
    /// Level-k sigma counts per root-child subtree (for the two-level scheme).
    slot_counts: Vec<u64>,
    visited: usize,
    overflow: bool,
    scratch: Vec<u32>,
}

impl<'a> SimEngine<'a> {
    fn new(cfg: &'a MajoritySimConfig) -> Self {
        let offspring = cfg.regime.offspring(&cfg.params);
        let bottom = ChildCountSampler::new(&cfg.params, &offspring, cfg.delta.as_ref());
        SimEngine {
            cfg,
            bottom,
            offspring,
        }
    }

    /// Simulate one node at `depth` with true label `sigma`; returns the
    /// (exact-label, noisy-label) iterated estimates of its subtree.
    fn node(
        &self,
        depth: usize,
        sigma: u8,
        slot: usize,
        st: &mut TrialState,
        rng: &mut impl Rng,
    ) -> (Option<u8>, Option<u8>) {
        let q = st.q;
        st.visited += 1;
        if st.visited > self.cfg.node_budget {
            st.overflow = true;
            return (None, None);
        }
        st.sigma_counts[depth][sigma as usize - 1] += 1;
        if depth >= 1 {
            if let Some(delta) = &self.cfg.delta {
                let tau = draw_from_row(rng, delta.row(sigma as usize - 1));
                st.tau_counts[depth][tau as usize - 1] += 1;
            }
        }
        if st.overflow {
            return (None, None);
        }

        if depth + 1 == self.cfg.k {
            // Collapse: draw the children's label-count marginals in one shot.
            let mut bufs = std::mem::take(&mut st.scratch);
            bufs.resize(2 * q + q * q, 0);
            let (sig, rest2) = bufs.split_at_mut(q);
            let (tau, joint) = rest2.split_at_mut(q);
            self.bottom.sample_marginals(sigma, rng, sig, tau, joint);
            let mut est_sigma = (0u64, None);
            let mut est_tau = (0u64, None);
            for kk in 0..q {
                let c = sig[kk] as u64;
                st.sigma_counts[self.cfg.k][kk] += c;
                if slot != usize::MAX {
                    st.slot_counts[slot * q + kk] += c;
                }
                if c > est_sigma.0 {
                    est_sigma = (c, Some(kk as u8 + 1));
                }
            }
            if self.bottom.has_noise() {
                for t in 0..q {
                    let c = tau[t] as u64;
                    st.tau_counts[self.cfg.k][t] += c;
                    if c > est_tau.0 {
                        est_tau = (c, Some(t as u8 + 1));
                    }
                }
            }
            st.scratch = bufs;
            return (est_sigma.1, est_tau.1);
        }

        let d = self.offspring.sample(rng);
        let keep = 1.0 - self.cfg.params.p;
        let mut votes_sigma = vec![0u64; q];
        let mut votes_tau = vec![0u64; q];
        for i in 0..d {
            let child_sigma = draw_child_label(rng, sigma, keep, q);
            let child_slot = if depth == 0 { i } else { slot };
            if depth == 0 && st.slot_counts.len() < (i + 1) * q {
                st.slot_counts.resize((i + 1) * q, 0);
            }
            let (es, et) = self.node(depth + 1, child_sigma, child_slot, st, rng);
            if let Some(e) = es {
                votes_sigma[e as usize - 1] += 1;
            }
            if let Some(e) = et {
                votes_tau[e as usize - 1] += 1;
            }
            if st.overflow {
                return (None, None);
            }
        }
        (argmax_votes(&votes_sigma), argmax_votes(&votes_tau))
    }

    fn run_trial(&self, trial: u64) -> Result<MajorityTrial> {
        let q = self.cfg.params.q;
        let k = self.cfg.k;
        let seed = derive_seed(self.cfg.seed, trial);
        let mut rng = stream_rng(self.cfg.seed, trial);
        let mut st = TrialState {
            q,
            sigma_counts: vec![vec![0u64; q]; k + 1],
            tau_counts: vec![vec![0u64; q]; k + 1],
            slot_counts: Vec::new(),
            visited: 0,
            overflow: false,
            scratch: Vec::new(),
        };
        let (est_sigma, est_tau) = self.node(0, 1, usize::MAX, &mut st, &mut rng);
        if st.overflow {
            return Err(Error::NodeBudget {
                budget: self.cfg.node_budget,
            });
        }

        let majority = argmax_votes(&st.sigma_counts[k]);
        let noisy_majority = if self.cfg.delta.is_some() {
            argmax_votes(&st.tau_counts[k])
        } else {
            None
        };
        let two_level = if k == 1 {
            majority
        } else {
            let slots = st.slot_counts.len() / q;
            let mut votes = vec![0u64; q];
            for s in 0..slots {
                if let Some(e) = argmax_votes(&st.slot_counts[s * q..(s + 1) * q]) {
                    votes[e as usize - 1] += 1;
                }
            }
            argmax_votes(&votes)
        };

        Ok(MajorityTrial {
            trial,
            seed,
            sigma_counts: st.sigma_counts,
            tau_counts: self.cfg.delta.as_ref().map(|_| st.tau_counts),
            majority,
            iterated: est_sigma,
            two_level,
            noisy_majority,
            noisy_iterated: if self.cfg.delta.is_some() { est_tau } else { None },
        })
    }
}

/// Run the majority Monte Carlo. Trials are independent streams of the
/// master seed, so the output is reproducible regardless of scheduling.
pub fn simulate_majority(cfg: &MajoritySimConfig) -> Result<Vec<MajorityTrial>> {
    use rayon::prelude::*;
    assert!(cfg.k >= 1, "majority simulation needs k >= 1");
    let engine = SimEngine::new(cfg);
    (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| engine.run_trial(t))
        .collect()
}

/// Per-level summary of a majority simulation against the analytic oracles.
#[derive(Debug, Clone, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub mean_z: f64,
    pub var_z: f64,
    pub oracle_z: f64,
    pub zscore_z: f64,
    pub mean_y: Vec<f64>,
    pub var_y: Vec<f64>,
    pub oracle_y: f64,
    pub zscore_y: Vec<f64>,
    pub var_bound: f64,
    /// Noisy-label analogues when a channel is in play: (mean, var, oracle, zscore) per label.
    pub noisy: Option<Vec<(f64, f64, f64, f64)>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MajoritySummary {
    pub trials: usize,
    pub k: usize,
    pub regime: Regime,
    pub r_constant: f64,
    pub majority_rate: f64,
    pub majority_se: f64,
    pub iterated_rate: f64,
    pub iterated_se: f64,
    pub two_level_rate: f64,
    pub noisy_majority_rate: Option<f64>,
    pub noisy_iterated_rate: Option<f64>,
    /// `max(0, 1 - 4Rq/(snr-1))`: the asymptotic lower bound on majority success.
    pub majority_success_bound: f64,
    pub levels: Vec<LevelSummary>,
}

fn mean_var(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Summarize simulation trials against the closed-form oracles.
pub fn summarize_majority(cfg: &MajoritySimConfig, trials: &[MajorityTrial]) -> MajoritySummary {
    let n = trials.len();
    let q = cfg.params.q;
    let rate = |f: &dyn Fn(&MajorityTrial) -> bool| {
        trials.iter().filter(|t| f(t)).count() as f64 / n as f64
    };
    let se_of = |r: f64| (r * (1.0 - r) / n as f64).sqrt();

    let mut levels = Vec::new();
    for k in 1..=cfg.k {
        let (mean_z, var_z) =
            mean_var(trials.iter().map(move |t| t.sigma_counts[k][0] as f64), n);
        let (oracle_z, oracle_y) = expected_counts(&cfg.params, k);
        let se_z = (var_z / n as f64).sqrt();
        let mut mean_y = Vec::new();
        let mut var_y = Vec::new();
        let mut zscore_y = Vec::new();
        for i in 1..q {
            let (m, v) = mean_var(trials.iter().map(move |t| t.sigma_counts[k][i] as f64), n);
            let se = (v / n as f64).sqrt();
            mean_y.push(m);
            var_y.push(v);
            zscore_y.push(if se > 0.0 { (m - oracle_y) / se } else { 0.0 });
        }
        let bound = variance_bound(&cfg.params, k, cfg.regime)
            .map(|r| r.var_bound)
            .unwrap_or_else(|_| variance_bound_critical(&cfg.params, k, cfg.regime).var_bound);
        let noisy = cfg.delta.as_ref().map(|delta| {
            let (oz, oy) = noisy_expected_counts(&cfg.params, delta, k);
            (0..q)
                .map(|j| {
                    let (m, v) = mean_var(
                        trials
                            .iter()
                            .map(move |t| t.tau_counts.as_ref().unwrap()[k][j] as f64),
                        n,
                    );
                    let oracle = if j == 0 { oz } else { oy[j - 1] };
                    let se = (v / n as f64).sqrt();
                    (m, v, oracle, if se > 0.0 { (m - oracle) / se } else { 0.0 })
                })
                .collect()
        });
        levels.push(LevelSummary {
            level: k,
            mean_z,
            var_z,
            oracle_z,
            zscore_z: if se_z > 0.0 { (mean_z - oracle_z) / se_z } else { 0.0 },
            mean_y,
            var_y,
            oracle_y,
            zscore_y,
            var_bound: bound,
            noisy,
        });
    }

    let majority_rate = rate(&|t| t.majority == Some(1));
    let iterated_rate = rate(&|t| t.iterated == Some(1));
    MajoritySummary {
        trials: n,
        k: cfg.k,
        regime: cfg.regime,
        r_constant: r_constant(&cfg.params, cfg.regime),
        majority_rate,
        majority_se: se_of(majority_rate),
        iterated_rate,
        iterated_se: se_of(iterated_rate),
        two_level_rate: rate(&|t| t.two_level == Some(1)),
        noisy_majority_rate: cfg.delta.as_ref().map(|_| rate(&|t| t.noisy_majority == Some(1))),
        noisy_iterated_rate: cfg.delta.as_ref().map(|_| rate(&|t| t.noisy_iterated == Some(1))),
        majority_success_bound: (1.0
            - 4.0 * r_constant(&cfg.params, cfg.regime) * q as f64 / (cfg.params.snr - 1.0))
            .max(0.0),
        levels,
    }
}
