//! Bivariate ordered discrete response models with general (non-lattice)
//! threshold structures.
//!
//! A bivariate ordered response takes values on a grid of category pairs
//! (j1, j2). Each pair corresponds to a rectangular cell of the latent plane,
//! with per-cell bounds taken from two threshold grids that may vary across
//! the other dimension's category. The crate covers:
//!
//! * threshold structures: coherency checking, hierarchy (decision tree)
//!   detection, tie grouping, random generation ([`model`]);
//! * Gaussian numerics: univariate and bivariate normal CDFs, inverse CDF,
//!   correlated sampling ([`gauss`]);
//! * the cell-probability likelihood, analytic scores, the coherency penalty
//!   and corner constraints ([`likelihood`]);
//! * penalized maximum likelihood with multistart quasi-Newton ascent, tie
//!   snapping and constrained sandwich covariance ([`estimate`]);
//! * data generation for the three benchmark designs ([`dgp`]);
//! * kernel-weighted monotone rank correlation for single-index slopes
//!   ([`mrc`]);
//! * a Monte Carlo harness and table renderer ([`mc`]), CSV I/O ([`io`]).
//!
//! All randomized components take explicit 64-bit seeds and produce
//! bit-identical output for a given seed, independent of thread count.

// Grid code indexes by category on purpose, and monotonicity guards are
// written `!(a < b)` so NaN fails them; both lints flag intended patterns.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dgp;
pub mod estimate;
pub mod gauss;
pub mod io;
pub mod likelihood;
pub mod mc;
pub mod model;
pub mod mrc;
pub mod seed;

mod optim;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid threshold structure: {0}")]
    InvalidStructure(String),

    #[error("incoherent threshold structure: {count} interior corner(s) violate continuity, first at ({j1}, {j2})")]
    Incoherent { count: usize, j1: usize, j2: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dataset has {n} observations, fewer than the {k} free coordinates")]
    TooFewObservations { n: usize, k: usize },

    #[error("category {category} of dimension {dim} never occurs in the data")]
    MissingCategory { dim: usize, category: usize },

    #[error("response {value} of dimension {dim} outside 1..={m} at row {row}")]
    ResponseOutOfRange {
        dim: usize,
        value: u32,
        m: usize,
        row: usize,
    },

    #[error("information matrix numerically singular (condition number {cond:.3e})")]
    SingularInformation { cond: f64 },

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("all pair weights below {floor:.1e}: kernel bandwidth too small for the data")]
    DegenerateKernel { floor: f64 },

    #[error("covariate column {index} has zero sample variance, bandwidth rule undefined")]
    ZeroVariance { index: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
