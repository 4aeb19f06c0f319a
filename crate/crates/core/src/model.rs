//! Parameter algebra of the symmetric block model: derived quantities
//! (d, p, lambda, snr), the per-edge transition matrix, and validation of
//! label-noise channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for internal algebraic identities (double precision, q <= ~64).
pub const IDENTITY_TOL: f64 = 1e-12;
/// Tolerance for validating user-supplied matrices.
pub const VALIDATION_TOL: f64 = 1e-9;

/// Model parameters with every derived quantity populated.
///
/// `q` communities, within-community edge rate `a/n`, cross-community rate
/// `b/n`. The derived fields are
///
/// * `d      = (a + b(q-1))/q`       — expected (branching) degree,
/// * `p      = b(q-1)/(a + b(q-1))`  — per-edge label flip probability,
/// * `lambda = 1 - p q/(q-1)`        — second eigenvalue of the transition matrix,
/// * `snr    = lambda^2 d`           — the signal-to-noise ratio governing
///   reconstructability (nontrivial root reconstruction needs `snr > 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub q: usize,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub p: f64,
    pub lambda: f64,
    pub snr: f64,
}

impl ModelParams {
    /// Derive all model quantities from `(q, a, b)`.
    ///
    /// Rejects `q < 3` and the non-assortative case `a <= b` (which would
    /// make `lambda <= 0`), as well as non-finite or negative rates.
    pub fn new(q: usize, a: f64, b: f64) -> Result<Self> {
        if q < 3 {
            return Err(Error::CommunityCount(q));
        }
        if !(a.is_finite() && b.is_finite()) || a <= 0.0 || b < 0.0 || a <= b {
            return Err(Error::EdgeRates { a, b });
        }
        let qf = q as f64;
        let total = a + b * (qf - 1.0);
        let d = total / qf;
        let p = b * (qf - 1.0) / total;
        let lambda = 1.0 - p * qf / (qf - 1.0);
        let snr = lambda * lambda * d;

        // The same quantity via the closed form in (a, b); the two routes must
        // agree to rounding for all admissible parameters.
        let snr_direct = (a - b) * (a - b) / (qf * total);
        debug_assert!(
            (snr - snr_direct).abs() <= IDENTITY_TOL * snr_direct.max(1.0),
            "snr derivations disagree: {snr} vs {snr_direct}"
        );

        Ok(ModelParams {
            q,
            a,
            b,
            d,
            p,
            lambda,
            snr,
        })
    }

    /// The `q x q` child-label transition matrix.
    pub fn transition_matrix(&self) -> TransitionMatrix {
        TransitionMatrix::new(self.q, self.p)
    }

    /// snr computed directly from the edge rates, `(a-b)^2 / (q(a + b(q-1)))`.
    pub fn snr_from_rates(&self) -> f64 {
        (self.a - self.b) * (self.a - self.b) / (self.q as f64 * (self.a + self.b * (self.q as f64 - 1.0)))
    }
}

/// Row-stochastic transition matrix: `M[i][i] = 1-p`, `M[i][j] = p/(q-1)`.
///
/// Its spectrum is `{1}` once and `{lambda}` with multiplicity `q-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    q: usize,
    p: f64,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(q: usize, p: f64) -> Self {
        let stay = 1.0 - p;
        let flip = p / (q as f64 - 1.0);
        let mut entries = vec![flip; q * q];
        for i in 0..q {
            entries[i * q + i] = stay;
        }
        TransitionMatrix { q, p, entries }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.q + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.q..(i + 1) * self.q]
    }

    /// Second eigenvalue, `1 - pq/(q-1)`.
    pub fn lambda(&self) -> f64 {
        1.0 - self.p * self.q as f64 / (self.q as f64 - 1.0)
    }
}

/// Validated label-noise channel `delta[i][j] = P(observed = j | true = i)`.
///
/// Admissible channels are doubly stochastic with diagonal at least `1 - 1/q`:
/// unit rows make it a channel, unit columns keep a uniform prior uniform
/// (so a leaf posterior is just a column of the matrix), and the diagonal
/// bound keeps the observed labels aligned with the true ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMatrix {
    q: usize,
    entries: Vec<f64>,
}

impl NoiseMatrix {
    /// Validate a square matrix as a noise channel. Checks, in order:
    /// entry non-negativity, unit row sums, unit column sums, and the
    /// diagonal bound — each with its own error.
    pub fn validate(q: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != q {
            return Err(Error::NoiseShape {
                q,
                rows: rows.len(),
                bad_row: rows.len(),
                bad_len: 0,
            });
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != q {
                return Err(Error::NoiseShape {
                    q,
                    rows: rows.len(),
                    bad_row: i,
                    bad_len: row.len(),
                });
            }
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(v >= 0.0) {
                    return Err(Error::NoiseNegativeEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > VALIDATION_TOL {
                return Err(Error::NoiseRowSum { row: i, sum });
            }
        }
        for j in 0..q {
            let sum: f64 = rows.iter().map(|r| r[j]).sum();
            if (sum - 1.0).abs() > VALIDATION_TOL {
                return Err(Error::NoiseColumnSum { col: j, sum });
            }
        }
        let bound = 1.0 - 1.0 / q as f64;
        for (i, row) in rows.iter().enumerate() {
            if row[i] < bound - VALIDATION_TOL {
                return Err(Error::NoiseDiagonal {
                    idx: i,
                    value: row[i],
                    bound,
                });
            }
        }
        let mut entries = Vec::with_capacity(q * q);
        for row in rows {
            entries.extend_from_slice(row);
        }
        Ok(NoiseMatrix { q, entries })
    }

    /// The identity channel (noiseless observations).
    pub fn identity(q: usize) -> Self {
        let mut entries = vec![0.0; q * q];
        for i in 0..q {
            entries[i * q + i] = 1.0;
        }
        NoiseMatrix { q, entries }
    }

    /// Symmetric channel with diagonal `c` and off-diagonal `(1-c)/(q-1)`.
    /// Admissible iff `c >= 1 - 1/q`.
    pub fn uniform_diag(q: usize, c: f64) -> Result<Self> {
        let bound = 1.0 - 1.0 / q as f64;
        if !(c.is_finite()) || c < bound - VALIDATION_TOL || c > 1.0 + VALIDATION_TOL {
            return Err(Error::NoiseDiagParam { diag: c, bound });
        }
        let off = (1.0 - c) / (q as f64 - 1.0);
        let mut entries = vec![off; q * q];
        for i in 0..q {
            entries[i * q + i] = c;
        }
        Ok(NoiseMatrix { q, entries })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.q + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.q..(i + 1) * self.q]
    }

    /// Column `j`, which is itself a probability vector over true labels
    /// (this is what makes the leaf initialization exact; see the `bp` docs).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.q).map(|i| self.entry(i, j)).collect()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.q).all(|i| (0..self.q).all(|j| {
            let want = if i == j { 1.0 } else { 0.0 };
            (self.entry(i, j) - want).abs() <= IDENTITY_TOL
        }))
    }

    /// Serialize as plain text: one row per line, entries space-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.q {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parse the plain-text format written by [`NoiseMatrix::to_text`] and
    /// validate the result. The community count is inferred from the first row.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut row = Vec::new();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: ln + 1,
                    msg: format!("bad number `{tok}`"),
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "empty noise matrix".into(),
            });
        }
        let q = rows[0].len();
        if q < 2 || rows.len() != q {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected a square matrix, got {} rows of width {}", rows.len(), q),
            });
        }
        NoiseMatrix::validate(q, &rows)
    }
}
