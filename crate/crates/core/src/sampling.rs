//! Table-driven samplers for the Monte Carlo engines.
//!
//! The deepest tree level dominates every harness, so the engines never
//! materialize it: a node one level above the observation depth draws the
//! joint (true label, noisy label) counts of its children in one shot.
//! For Poisson offspring the joint counts are independent Poissons (thinning);
//! for fixed offspring they come from a conditional-binomial chain. Both
//! paths are exact samplers of the same distribution as per-child draws.

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::model::{ModelParams, NoiseMatrix};

/// Inverse-CDF Poisson sampler with a guide table and an exact tail
/// extension. The guide table narrows the CDF search to a couple of
/// comparisons; the result is identical to a full inverse-CDF scan.
pub struct PoissonSampler {
    mean: f64,
    cum: Vec<f64>,
    tail_pmf: f64,
    /// guide[j] = smallest k with cum[k] >= j/GUIDE, so the answer for
    /// u in [j/GUIDE, (j+1)/GUIDE) lies in guide[j]..=guide[j+1].
    guide: Vec<u32>,
}

const POISSON_GUIDE: usize = 256;

impl PoissonSampler {
    pub fn new(mean: f64) -> Self {
        assert!(mean >= 0.0 && mean.is_finite());
        if mean == 0.0 {
            return PoissonSampler {
                mean,
                cum: vec![1.0],
                tail_pmf: 0.0,
                guide: vec![0; POISSON_GUIDE + 1],
            };
        }
        // Table out to mean + 12 sqrt(mean) + 16 covers all but ~1e-12 mass.
        let cap = (mean + 12.0 * mean.sqrt() + 16.0).ceil() as usize;
        let mut cum = Vec::with_capacity(cap + 1);
        let mut pmf = (-mean).exp();
        let mut acc = pmf;
        cum.push(acc);
        for k in 1..=cap {
            pmf *= mean / k as f64;
            acc += pmf;
            cum.push(acc);
        }
        let mut guide = vec![cum.len() as u32; POISSON_GUIDE + 1];
        for j in 0..=POISSON_GUIDE {
            let u = j as f64 / POISSON_GUIDE as f64;
            guide[j] = cum.partition_point(|&c| c < u) as u32;
        }
        PoissonSampler {
            mean,
            cum,
            tail_pmf: pmf,
            guide,
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    #[inline]
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let j = (u * POISSON_GUIDE as f64) as usize;
        let mut k = self.guide[j] as usize;
        let hi = self.guide[j + 1] as usize;
        while k < hi && k < self.cum.len() && self.cum[k] < u {
            k += 1;
        }
        if k < self.cum.len() {
            return k;
        }
        // Tail: continue the pmf recurrence exactly.
        let mut k = self.cum.len() - 1;
        let mut pmf = self.tail_pmf;
        let mut acc = *self.cum.last().unwrap();
        while u >= acc {
            k += 1;
            pmf *= self.mean / k as f64;
            acc += pmf;
            if pmf == 0.0 {
                break;
            }
        }
        k
    }
}

/// Multinomial sampler over `cells` probabilities with fixed trial count `n`,
/// backed by per-cell conditional-binomial inverse-CDF tables when `n` is
/// small enough, and by `rand_distr::Binomial` otherwise.
pub struct MultinomialSampler {
    probs: Vec<f64>,
    /// cond[j] = p_j / (p_j + ... + p_last)
    cond: Vec<f64>,
    /// tables[j][m] = cumulative CDF of Bin(m, cond[j]), for m <= cap.
    tables: Vec<Vec<Vec<f64>>>,
    cap: usize,
}

/// Above this trial count the chain falls back to direct binomial sampling.
const MULTINOMIAL_TABLE_CAP: usize = 512;
/// Rough limit on the table memory (in f64 entries) we are willing to build.
const MULTINOMIAL_TABLE_BUDGET: usize = 8_000_000;

fn binomial_cdf_row(m: usize, p: f64) -> Vec<f64> {
    // pmf recurrence; exact enough for sampling (errors ~1e-14 cumulative).
    let mut row = Vec::with_capacity(m + 1);
    if p <= 0.0 {
        row.push(1.0);
        for _ in 1..=m {
            row.push(1.0);
        }
        return row;
    }
    if p >= 1.0 {
        for _ in 0..m {
            row.push(0.0);
        }
        row.push(1.0);
        return row;
    }
    let q = 1.0 - p;
    let mut pmf = q.powi(m as i32);
    let mut acc = pmf;
    row.push(acc);
    for k in 1..=m {
        pmf *= (m - k + 1) as f64 / k as f64 * (p / q);
        acc += pmf;
        row.push(acc);
    }
    row
}

impl MultinomialSampler {
    pub fn new(probs: &[f64], expected_n: usize) -> Self {
        let cells = probs.len();
        let mut cond = vec![0.0; cells];
        let mut rest: f64 = probs.iter().sum();
        for j in 0..cells {
            cond[j] = if rest > 0.0 { (probs[j] / rest).min(1.0) } else { 0.0 };
            rest -= probs[j];
        }
        let cap = expected_n.min(MULTINOMIAL_TABLE_CAP);
        let entries = cells * (cap + 1) * (cap + 2) / 2;
        let cap = if entries > MULTINOMIAL_TABLE_BUDGET { 0 } else { cap };
        let mut tables = Vec::with_capacity(cells);
        for j in 0..cells.saturating_sub(1) {
            let mut per_m = Vec::with_capacity(cap + 1);
            for m in 0..=cap {
                per_m.push(binomial_cdf_row(m, cond[j]));
            }
            tables.push(per_m);
        }
        MultinomialSampler {
            probs: probs.to_vec(),
            cond,
            tables,
            cap,
        }
    }

    /// Draw counts for `n` trials into `out` (len = cells).
    pub fn sample(&self, n: usize, rng: &mut impl Rng, out: &mut [u32]) {
        let cells = self.probs.len();
        debug_assert_eq!(out.len(), cells);
        let mut remaining = n;
        for j in 0..cells - 1 {
            if remaining == 0 {
                out[j] = 0;
                continue;
            }
            let c = if remaining <= self.cap {
                let row = &self.tables[j][remaining];
                let u: f64 = rng.gen();
                row.partition_point(|&c| c < u).min(remaining)
            } else {
                let p = self.cond[j];
                if p <= 0.0 {
                    0
                } else if p >= 1.0 {
                    remaining
                } else {
                    Binomial::new(remaining as u64, p).unwrap().sample(rng) as usize
                }
            };
            out[j] = c as u32;
            remaining -= c;
        }
        out[cells - 1] = remaining as u32;
    }
}

/// One-uniform-draw multinomial sampler: for each trial count `n <= cap`,
/// the full outcome vector is drawn by inverse CDF over the (lexicographic)
/// compositions of `n`, with a guide table narrowing the scan. Exact, and
/// roughly `q-1` times fewer RNG draws than a conditional-binomial chain.
pub struct OutcomeTable {
    q: usize,
    cap: usize,
    probs: Vec<f64>,
    rows: Vec<OutcomeRow>,
}

struct OutcomeRow {
    cum: Vec<f64>,
    /// Flat q-wide outcome vectors, aligned with `cum`.
    cells: Vec<u32>,
    guide: Vec<u32>,
}

const OUTCOME_GUIDE: usize = 64;

fn compositions(n: u32, q: usize, prefix: &mut Vec<u32>, out: &mut Vec<u32>) {
    if prefix.len() == q - 1 {
        out.extend_from_slice(prefix);
        out.push(n);
        return;
    }
    for c in 0..=n {
        prefix.push(c);
        compositions(n - c, q, prefix, out);
        prefix.pop();
    }
}

impl OutcomeTable {
    pub fn new(probs: &[f64], cap: usize) -> Self {
        let q = probs.len();
        let mut ln_fact = vec![0.0f64; cap + 2];
        for i in 1..ln_fact.len() {
            ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
        }
        let ln_p: Vec<f64> = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        let mut rows = Vec::with_capacity(cap + 1);
        for n in 0..=cap as u32 {
            let mut cells = Vec::new();
            compositions(n, q, &mut Vec::new(), &mut cells);
            let count = cells.len() / q;
            let mut cum = Vec::with_capacity(count);
            let mut acc = 0.0;
            for o in 0..count {
                let outcome = &cells[o * q..(o + 1) * q];
                let mut lp = ln_fact[n as usize];
                let mut dead = false;
                for (t, &c) in outcome.iter().enumerate() {
                    lp -= ln_fact[c as usize];
                    if c > 0 {
                        if ln_p[t] == f64::NEG_INFINITY {
                            dead = true;
                            break;
                        }
                        lp += c as f64 * ln_p[t];
                    }
                }
                acc += if dead { 0.0 } else { lp.exp() };
                cum.push(acc);
            }
            // Normalize away the ~1e-15 enumeration rounding.
            let total = acc;
            if total > 0.0 {
                for v in &mut cum {
                    *v /= total;
                }
            }
            let mut guide = vec![count as u32; OUTCOME_GUIDE + 1];
            for j in 0..=OUTCOME_GUIDE {
                let u = j as f64 / OUTCOME_GUIDE as f64;
                guide[j] = cum.partition_point(|&c| c < u) as u32;
            }
            rows.push(OutcomeRow { cum, cells, guide });
        }
        OutcomeTable {
            q,
            cap,
            probs: probs.to_vec(),
            rows,
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Draw the counts of `n` trials into `out` (added, not overwritten).
    #[inline]
    pub fn sample_into(&self, n: usize, rng: &mut impl Rng, out: &mut [u32]) {
        if n == 0 {
            return;
        }
        if n > self.cap {
            // Exact fallback: conditional binomial chain.
            let mut remaining = n as u64;
            let mut rest: f64 = self.probs.iter().sum();
            for t in 0..self.q - 1 {
                if remaining == 0 {
                    break;
                }
                let p = (self.probs[t] / rest).clamp(0.0, 1.0);
                let c = if p >= 1.0 {
                    remaining
                } else if p <= 0.0 {
                    0
                } else {
                    Binomial::new(remaining, p).unwrap().sample(rng)
                };
                out[t] += c as u32;
                remaining -= c;
                rest -= self.probs[t];
            }
            out[self.q - 1] += remaining as u32;
            return;
        }
        let row = &self.rows[n];
        let u: f64 = rng.gen();
        let j = (u * OUTCOME_GUIDE as f64) as usize;
        let mut k = row.guide[j] as usize;
        let hi = (row.guide[j + 1] as usize).min(row.cum.len() - 1);
        while k < hi && row.cum[k] < u {
            k += 1;
        }
        let outcome = &row.cells[k * self.q..(k + 1) * self.q];
        for (o, &c) in out.iter_mut().zip(outcome) {
            *o += c;
        }
    }
}

/// Offspring-count law for the tree regimes.
pub enum Offspring {
    Fixed(usize),
    Poisson(PoissonSampler),
}

impl Offspring {
    pub fn regular(d: usize) -> Self {
        Offspring::Fixed(d)
    }

    pub fn galton_watson(mean: f64) -> Self {
        Offspring::Poisson(PoissonSampler::new(mean))
    }

    #[inline]
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match self {
            Offspring::Fixed(d) => *d,
            Offspring::Poisson(p) => p.sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Offspring::Fixed(d) => *d as f64,
            Offspring::Poisson(p) => p.mean(),
        }
    }
}

/// Sampler for the children of one node at the collapse level: given the
/// parent's true label, draws the marginal count vectors of the children's
/// true labels (`sig_out`) and noisy labels (`tau_out`) jointly and exactly.
///
/// Poisson offspring: by thinning, the count with true label `k` is
/// `Pois(d M[s][k])`, and its noisy split is an independent multinomial over
/// the channel row `k`. Fixed offspring: one multinomial over the `q*q`
/// joint cells. Without a channel only the true-label marginal is drawn.
pub enum ChildCountSampler {
    PoisRows {
        q: usize,
        /// Per (parent label, true label) sampler index, deduplicated by rate.
        samplers: Vec<PoissonSampler>,
        grid: Vec<u32>,
        /// Per true label: one-draw multinomial over the channel row.
        splits: Vec<OutcomeTable>,
    },
    FixedJoint {
        q: usize,
        d: usize,
        per_label: Vec<MultinomialSampler>,
    },
    PoissonMarginal {
        q: usize,
        samplers: Vec<PoissonSampler>,
        grid: Vec<u32>,
    },
    FixedMarginal {
        q: usize,
        d: usize,
        per_label: Vec<MultinomialSampler>,
    },
}

impl ChildCountSampler {
    pub fn new(
        params: &ModelParams,
        offspring: &Offspring,
        delta: Option<&NoiseMatrix>,
    ) -> Self {
        let q = params.q;
        let m = params.transition_matrix();
        let dedup_grid = |rates: &mut dyn Iterator<Item = f64>| {
            let mut samplers: Vec<PoissonSampler> = Vec::new();
            let mut grid = Vec::new();
            for rate in rates {
                let idx = samplers
                    .iter()
                    .position(|smp| smp.mean() == rate)
                    .unwrap_or_else(|| {
                        samplers.push(PoissonSampler::new(rate));
                        samplers.len() - 1
                    });
                grid.push(idx as u32);
            }
            (samplers, grid)
        };
        match (offspring, delta) {
            (Offspring::Poisson(p), Some(delta)) => {
                let mean = p.mean();
                let mut rates = (0..q * q).map(|i| mean * m.entry(i / q, i % q));
                let (samplers, grid) = dedup_grid(&mut rates);
                let cap = (mean + 12.0 * mean.sqrt() + 24.0).ceil() as usize;
                let splits = (0..q).map(|k| OutcomeTable::new(delta.row(k), cap)).collect();
                ChildCountSampler::PoisRows {
                    q,
                    samplers,
                    grid,
                    splits,
                }
            }
            (Offspring::Fixed(d), Some(delta)) => {
                let per_label = (0..q)
                    .map(|s| {
                        let mut probs = Vec::with_capacity(q * q);
                        for k in 0..q {
                            for t in 0..q {
                                probs.push(m.entry(s, k) * delta.entry(k, t));
                            }
                        }
                        MultinomialSampler::new(&probs, *d)
                    })
                    .collect();
                ChildCountSampler::FixedJoint {
                    q,
                    d: *d,
                    per_label,
                }
            }
            (Offspring::Poisson(p), None) => {
                let mean = p.mean();
                let mut rates = (0..q * q).map(|i| mean * m.entry(i / q, i % q));
                let (samplers, grid) = dedup_grid(&mut rates);
                ChildCountSampler::PoissonMarginal { q, samplers, grid }
            }
            (Offspring::Fixed(d), None) => {
                let per_label = (0..q)
                    .map(|s| MultinomialSampler::new(m.row(s), *d))
                    .collect();
                ChildCountSampler::FixedMarginal {
                    q,
                    d: *d,
                    per_label,
                }
            }
        }
    }

    /// Whether `tau_out` is populated by `sample_marginals`.
    pub fn has_noise(&self) -> bool {
        matches!(
            self,
            ChildCountSampler::PoisRows { .. } | ChildCountSampler::FixedJoint { .. }
        )
    }

    /// Draw the children's label-count marginals for a parent with true
    /// label `sigma` (1-based). `sig_out`/`tau_out` are overwritten;
    /// `scratch` must hold `q*q` entries for the fixed-joint path.
    #[inline]
    pub fn sample_marginals(
        &self,
        sigma: u8,
        rng: &mut impl Rng,
        sig_out: &mut [u32],
        tau_out: &mut [u32],
        scratch: &mut [u32],
    ) {
        let s = sigma as usize - 1;
        match self {
            ChildCountSampler::PoisRows {
                q,
                samplers,
                grid,
                splits,
            } => {
                tau_out.iter_mut().for_each(|v| *v = 0);
                for k in 0..*q {
                    let c = samplers[grid[s * q + k] as usize].sample(rng);
                    sig_out[k] = c as u32;
                    splits[k].sample_into(c, rng, tau_out);
                }
            }
            ChildCountSampler::FixedJoint { q, d, per_label } => {
                per_label[s].sample(*d, rng, scratch);
                for k in 0..*q {
                    let mut row = 0u32;
                    for t in 0..*q {
                        row += scratch[k * q + t];
                    }
                    sig_out[k] = row;
                }
                for t in 0..*q {
                    let mut col = 0u32;
                    for k in 0..*q {
                        col += scratch[k * q + t];
                    }
                    tau_out[t] = col;
                }
            }
            ChildCountSampler::PoissonMarginal { q, samplers, grid } => {
                for k in 0..*q {
                    sig_out[k] = samplers[grid[s * q + k] as usize].sample(rng) as u32;
                }
            }
            ChildCountSampler::FixedMarginal { d, per_label, .. } => {
                per_label[s].sample(*d, rng, sig_out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master_rng;

    #[test]
    fn poisson_sampler_moments() {
        let p = PoissonSampler::new(7.0);
        let mut rng = master_rng(1);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = p.sample(&mut rng) as f64;
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // 5 sigma on the mean: sigma = sqrt(7/n)
        let tol = 5.0 * (7.0f64 / n as f64).sqrt();
        assert!((mean - 7.0).abs() < tol, "mean {mean}");
        assert!((var - 7.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn poisson_zero_rate() {
        let p = PoissonSampler::new(0.0);
        let mut rng = master_rng(2);
        for _ in 0..100 {
            assert_eq!(p.sample(&mut rng), 0);
        }
    }

    #[test]
    fn multinomial_sampler_moments() {
        let probs = [0.7, 0.2, 0.1];
        let ms = MultinomialSampler::new(&probs, 18);
        let mut rng = master_rng(3);
        let n = 100_000;
        let mut sums = [0.0f64; 3];
        let mut out = [0u32; 3];
        for _ in 0..n {
            ms.sample(18, &mut rng, &mut out);
            assert_eq!(out.iter().sum::<u32>(), 18);
            for j in 0..3 {
                sums[j] += out[j] as f64;
            }
        }
        for j in 0..3 {
            let mean = sums[j] / n as f64;
            let want = 18.0 * probs[j];
            let sd = (18.0 * probs[j] * (1.0 - probs[j]) / n as f64).sqrt();
            assert!((mean - want).abs() < 5.0 * sd, "cell {j}: {mean} vs {want}");
        }
    }

    #[test]
    fn multinomial_fallback_above_cap() {
        let probs = [0.5, 0.5];
        let ms = MultinomialSampler::new(&probs, 10_000);
        let mut rng = master_rng(4);
        let mut out = [0u32; 2];
        ms.sample(10_000, &mut rng, &mut out);
        assert_eq!(out[0] + out[1], 10_000);
        let dev = (out[0] as f64 - 5_000.0).abs();
        assert!(dev < 5.0 * (10_000.0f64 * 0.25).sqrt());
    }

    #[test]
    fn joint_sampler_marginals_match() {
        use crate::model::{ModelParams, NoiseMatrix};
        let params = ModelParams::new(3, 50.0, 2.0).unwrap();
        let delta = NoiseMatrix::uniform_diag(3, 0.8).unwrap();
        let off = Offspring::galton_watson(params.d);
        let s = ChildCountSampler::new(&params, &off, Some(&delta));
        let mut rng = master_rng(5);
        let n = 50_000;
        let mut sig = [0u32; 3];
        let mut tau = [0u32; 3];
        let mut scratch = [0u32; 9];
        let mut sigma_mean = [0.0f64; 3];
        let mut tau_mean = [0.0f64; 3];
        for _ in 0..n {
            s.sample_marginals(1, &mut rng, &mut sig, &mut tau, &mut scratch);
            let (st, tt): (u32, u32) = (sig.iter().sum(), tau.iter().sum());
            assert_eq!(st, tt, "marginals must describe the same children");
            for k in 0..3 {
                sigma_mean[k] += sig[k] as f64;
            }
            for t in 0..3 {
                tau_mean[t] += tau[t] as f64;
            }
        }
        let m = params.transition_matrix();
        for k in 0..3 {
            let want = params.d * m.entry(0, k);
            let got = sigma_mean[k] / n as f64;
            let sd = (want / n as f64).sqrt();
            assert!((got - want).abs() < 5.0 * sd, "sigma {k}: {got} vs {want}");
        }
        // tau marginal: sum_k d M[0][k] delta[k][t]
        for t in 0..3 {
            let want: f64 = (0..3).map(|k| params.d * m.entry(0, k) * delta.entry(k, t)).sum();
            let got = tau_mean[t] / n as f64;
            let sd = (want / n as f64).sqrt();
            assert!((got - want).abs() < 5.0 * sd, "tau {t}: {got} vs {want}");
        }
    }
}
