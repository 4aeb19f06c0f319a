use thiserror::Error;

/// Errors surfaced by the library. Validation failures carry enough context
/// to report the offending value without re-deriving it at the call site.
#[derive(Debug, Error)]
pub enum Error {
    // ---- model ----
    #[error("community count q must be at least 3, got {0}")]
    CommunityCount(usize),
    #[error("edge rates must satisfy a > b >= 0 with a > 0, got a={a}, b={b}")]
    EdgeRates { a: f64, b: f64 },
    #[error("noise matrix must be {q}x{q}, got {rows} rows (row {bad_row} has {bad_len} entries)")]
    NoiseShape {
        q: usize,
        rows: usize,
        bad_row: usize,
        bad_len: usize,
    },
    #[error("noise matrix entry ({row},{col}) = {value} is negative")]
    NoiseNegativeEntry { row: usize, col: usize, value: f64 },
    #[error("noise matrix row {row} sums to {sum}, expected 1")]
    NoiseRowSum { row: usize, sum: f64 },
    #[error("noise matrix column {col} sums to {sum}, expected 1")]
    NoiseColumnSum { col: usize, sum: f64 },
    #[error("noise matrix diagonal entry ({idx},{idx}) = {value} is below 1 - 1/q = {bound}")]
    NoiseDiagonal { idx: usize, value: f64, bound: f64 },
    #[error("uniform-diag noise level {diag} is below the admissible minimum 1 - 1/q = {bound}")]
    NoiseDiagParam { diag: f64, bound: f64 },

    // ---- tree ----
    #[error("tree would exceed the node budget of {budget} nodes")]
    NodeBudget { budget: usize },
    #[error("tree has no level {level}; deepest level is {depth}")]
    LevelMissing { level: usize, depth: usize },
    #[error("tree labels have not been broadcast yet")]
    Unlabeled,
    #[error("root label {label} outside 1..={q}")]
    BadRootLabel { label: u8, q: usize },
    #[error("noisy labels cover level {have}, but level {want} was requested")]
    NoisyLevelMismatch { have: usize, want: usize },

    // ---- majority ----
    #[error("variance bound is singular at snr = 1; use the critical form k * R * d^k instead")]
    CriticalSnr,
    #[error("iterated-majority fixed point needs 0.16*d > lambda (d={d}, lambda={lambda})")]
    FixedPointVacuous { d: f64, lambda: f64 },
    #[error("level {level} is empty; no counts to take a majority over")]
    EmptyLevel { level: usize },

    // ---- bp ----
    #[error("posterior must have {q} entries, got {len}")]
    PosteriorLength { q: usize, len: usize },
    #[error("posterior entry {idx} = {value} is negative")]
    PosteriorNegative { idx: usize, value: f64 },
    #[error("posterior sums to {sum}, expected 1 within {tol}")]
    PosteriorSum { sum: f64, tol: f64 },
    #[error("gradient formulas degenerate at lambda = 1")]
    GradientAtUnitLambda,
    #[error("posterior depth m must be at least 1")]
    ZeroDepthPosterior,

    // ---- sbm ----
    #[error("edge probability {rate}/n exceeds 1 at n = {n}")]
    EdgeProbability { rate: f64, n: usize },
    #[error("graph needs at least q = {q} vertices, got n = {n}")]
    GraphTooSmall { n: usize, q: usize },
    #[error("coupling radius needs 2(a+b) > 1, got 2(a+b) = {value}")]
    CouplingRadiusUndefined { value: f64 },
    #[error("vertex {v} out of range for a graph on {n} vertices")]
    VertexOutOfRange { v: usize, n: usize },

    // ---- spectral ----
    #[error("eigen-iteration failed: {0}")]
    EigenFailure(String),
    #[error("transition matrix is singular at lambda = 0; noise inversion is impossible")]
    SingularTransition,
    #[error("no vertices of degree >= {k} in the sample; increase n (currently {n})")]
    NoHighDegreeVertices { k: usize, n: usize },
    #[error("graph too small for anchor sampling: n = {n} < 100")]
    AnchorSampleTooSmall { n: usize },
    #[error("no anchor candidate falls in partition block {block}")]
    AnchorMissing { block: u8 },
    #[error("partition assigns {got} blocks, expected {expected}")]
    PartitionBlockCount { got: usize, expected: usize },
    #[error("partitions cover different vertex counts: {left} vs {right}")]
    PartitionSizeMismatch { left: usize, right: usize },

    // ---- formats / config ----
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("unknown noise specification `{0}` (expected identity, uniform-diag:<c>, or file:<path>)")]
    DeltaSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
