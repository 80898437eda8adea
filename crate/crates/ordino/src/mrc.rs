//! Kernel-localized maximum rank correlation estimation of exclusive-covariate
//! slope ratios in one dimension of the bivariate model.
//!
//! For response dimension `d` and exclusive columns `e_1..e_L` of that
//! equation (the slope of `e_1` is normalized to 1), the objective scans
//! ordered pairs `i < j` and rewards concordance between the response order
//! and the exclusive index order, weighted by a Gaussian product kernel on
//! the pairwise differences of every other covariate in both equations:
//!
//! ```text
//! Q(b) = sum_{i<j} 1(Y_d(i) > Y_d(j)) * 1(dx'(1,b) > 0) * prod_c phi(dz_c / h_c) / h_c
//! ```
//!
//! A column entering both equations contributes two identical kernel factors,
//! one per equation block. Q is a step function of `b`, so the maximizer is
//! located by nested exhaustive grid refinement rather than gradient ascent.

use rayon::prelude::*;

use crate::gauss::norm_pdf;
use crate::likelihood::Dataset;
use crate::{Error, Result};

/// Pairs summed per parallel chunk; fixed so totals are bit-identical across
/// thread counts.
const CHUNK: usize = 4096;

/// Kernel weights this far below scale mean the bandwidth starved the fit.
const DEGENERATE_FLOOR: f64 = 1e-12;

/// Kernel family for the pairwise localization weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Kernel {
    #[default]
    GaussianProduct,
}

/// Nested grid refinement settings: `points` per coordinate per level, the
/// first level spanning `center +/- halfwidth`, each later level centered at
/// the incumbent with twice the previous level's spacing as halfwidth.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSettings {
    pub levels: usize,
    pub points: usize,
    pub halfwidth: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            levels: 3,
            points: 41,
            halfwidth: 5.0,
        }
    }
}

/// Configuration of one rank-correlation fit.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MrcConfig {
    /// Response dimension, 1 or 2.
    pub dimension: usize,
    /// Column indices (into that equation's covariate block) of the exclusive
    /// covariates; the first one carries the unit coefficient.
    pub exclusive: Vec<usize>,
    /// Bandwidth per localized column (equation-1 block first, then
    /// equation 2); `None` selects [`default_bandwidth`].
    pub bandwidth: Option<Vec<f64>>,
    pub kernel: Kernel,
    pub grid: GridSettings,
    /// Reserved for randomized search modes; the exhaustive grid ignores it.
    pub seed: u64,
}

impl MrcConfig {
    pub fn new(dimension: usize, exclusive: Vec<usize>) -> Self {
        Self {
            dimension,
            exclusive,
            bandwidth: None,
            kernel: Kernel::GaussianProduct,
            grid: GridSettings::default(),
            seed: 0,
        }
    }
}

/// Result of [`fit_mrc`]: the free coefficients (all but the normalized
/// first), the attained objective, the incumbent objective after each grid
/// level, and the final grid spacing.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MrcFit {
    pub b_free: Vec<f64>,
    pub objective: f64,
    pub level_best: Vec<f64>,
    pub resolution: f64,
}

/// Localized (kernel-weighted) columns: every covariate of both equations
/// except the exclusive ones of the fitted dimension. Returned as
/// (equation, column) in block order.
fn localized_columns(data: &Dataset, cfg: &MrcConfig) -> Vec<(usize, usize)> {
    let mut cols = Vec::new();
    for (eq, k) in [(1, data.k1()), (2, data.k2())] {
        for c in 0..k {
            if eq == cfg.dimension && cfg.exclusive.contains(&c) {
                continue;
            }
            cols.push((eq, c));
        }
    }
    cols
}

fn check_config(data: &Dataset, cfg: &MrcConfig) -> Result<()> {
    if cfg.dimension != 1 && cfg.dimension != 2 {
        return Err(Error::InvalidParameter(format!(
            "dimension must be 1 or 2, got {}",
            cfg.dimension
        )));
    }
    if cfg.exclusive.is_empty() {
        return Err(Error::InvalidParameter(
            "exclusive column set must not be empty".into(),
        ));
    }
    let k_d = if cfg.dimension == 1 {
        data.k1()
    } else {
        data.k2()
    };
    for (i, &c) in cfg.exclusive.iter().enumerate() {
        if c >= k_d {
            return Err(Error::InvalidParameter(format!(
                "exclusive column {c} outside 0..{k_d}"
            )));
        }
        if cfg.exclusive[..i].contains(&c) {
            return Err(Error::InvalidParameter(format!(
                "exclusive column {c} listed twice"
            )));
        }
    }
    if data.n() < 2 {
        return Err(Error::Data(
            "pairwise objective needs at least 2 observations".into(),
        ));
    }
    if cfg.grid.levels == 0
        || cfg.grid.points < 2
        || !cfg.grid.halfwidth.is_finite()
        || cfg.grid.halfwidth <= 0.0
    {
        return Err(Error::InvalidParameter(
            "grid needs levels >= 1, points >= 2 and positive halfwidth".into(),
        ));
    }
    Ok(())
}

/// Rule-of-thumb bandwidth per localized column: `1.06 * sigma_hat * n^(-1/6)`
/// with the usual n-1 variance denominator. Empty when every covariate is
/// exclusive (the kernel weight is then identically 1).
pub fn default_bandwidth(data: &Dataset, cfg: &MrcConfig) -> Result<Vec<f64>> {
    check_config(data, cfg)?;
    let n = data.n();
    if n < 10 {
        return Err(Error::Data(format!(
            "bandwidth rule needs at least 10 observations, got {n}"
        )));
    }
    let mut h = Vec::new();
    for (pos, &(eq, c)) in localized_columns(data, cfg).iter().enumerate() {
        let value = |i: usize| {
            if eq == 1 {
                data.x1_row(i)[c]
            } else {
                data.x2_row(i)[c]
            }
        };
        let mean = (0..n).map(value).sum::<f64>() / n as f64;
        let ss = (0..n).map(|i| (value(i) - mean).powi(2)).sum::<f64>();
        let sd = (ss / (n - 1) as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::ZeroVariance { index: pos });
        }
        h.push(1.06 * sd * (n as f64).powf(-1.0 / 6.0));
    }
    Ok(h)
}

/// Precomputed pair scan: one row per ordered pair `i < j` with a strict
/// response fall `Y_d(i) > Y_d(j)`, carrying the kernel weight and the
/// exclusive-column differences (normalized column first).
struct PairSet {
    weights: Vec<f64>,
    dx: Vec<f64>,
    l: usize,
}

fn build_pairs(data: &Dataset, cfg: &MrcConfig) -> Result<PairSet> {
    check_config(data, cfg)?;
    let localized = localized_columns(data, cfg);
    let bandwidth = match &cfg.bandwidth {
        Some(h) => h.clone(),
        None if localized.is_empty() => Vec::new(),
        None => default_bandwidth(data, cfg)?,
    };
    if bandwidth.len() != localized.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} bandwidths for {} localized columns",
            bandwidth.len(),
            localized.len()
        )));
    }
    if bandwidth.iter().any(|&h| !h.is_finite() || h <= 0.0) {
        return Err(Error::InvalidParameter(
            "bandwidths must be positive and finite".into(),
        ));
    }

    let n = data.n();
    let l = cfg.exclusive.len();
    let y = if cfg.dimension == 1 {
        data.y1()
    } else {
        data.y2()
    };
    let x_d = |i: usize| {
        if cfg.dimension == 1 {
            data.x1_row(i)
        } else {
            data.x2_row(i)
        }
    };
    let Kernel::GaussianProduct = cfg.kernel;

    let per_row: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut weights = Vec::new();
            let mut dx = Vec::new();
            for j in i + 1..n {
                if y[i] <= y[j] {
                    continue;
                }
                let mut w = 1.0;
                for (&(eq, c), &h) in localized.iter().zip(&bandwidth) {
                    let (zi, zj) = if eq == 1 {
                        (data.x1_row(i)[c], data.x1_row(j)[c])
                    } else {
                        (data.x2_row(i)[c], data.x2_row(j)[c])
                    };
                    w *= norm_pdf((zi - zj) / h) / h;
                }
                weights.push(w);
                for &c in &cfg.exclusive {
                    dx.push(x_d(i)[c] - x_d(j)[c]);
                }
            }
            (weights, dx)
        })
        .collect();

    let mut weights = Vec::new();
    let mut dx = Vec::new();
    for (w_row, dx_row) in per_row {
        weights.extend(w_row);
        dx.extend(dx_row);
    }
    Ok(PairSet { weights, dx, l })
}

impl PairSet {
    /// Objective at coefficients `(1, b_free)`, summed in fixed-size chunks
    /// so the value is independent of the parallel schedule.
    fn eval(&self, b_free: &[f64]) -> f64 {
        let l = self.l;
        let sums: Vec<f64> = self
            .weights
            .par_chunks(CHUNK)
            .zip(self.dx.par_chunks(CHUNK * l))
            .map(|(ws, dxs)| {
                let mut acc = 0.0;
                for (p, &w) in ws.iter().enumerate() {
                    let row = &dxs[p * l..(p + 1) * l];
                    let mut dot = row[0];
                    for (c, &b) in b_free.iter().enumerate() {
                        dot += row[c + 1] * b;
                    }
                    if dot > 0.0 {
                        acc += w;
                    }
                }
                acc
            })
            .collect();
        sums.iter().sum()
    }
}

/// Rank-correlation objective at the given free coefficients.
pub fn mrc_objective(b_free: &[f64], data: &Dataset, cfg: &MrcConfig) -> Result<f64> {
    if b_free.len() + 1 != cfg.exclusive.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} free coefficients for {} exclusive columns",
            b_free.len(),
            cfg.exclusive.len()
        )));
    }
    Ok(build_pairs(data, cfg)?.eval(b_free))
}

/// Maximizes the rank-correlation objective over the free coefficients by
/// nested grid refinement. The returned point attains the maximum over every
/// grid point visited; ties keep the earliest point in scan order.
pub fn fit_mrc(data: &Dataset, cfg: &MrcConfig) -> Result<MrcFit> {
    let pairs = build_pairs(data, cfg)?;
    if !pairs.weights.is_empty() && pairs.weights.iter().all(|&w| w < DEGENERATE_FLOOR) {
        return Err(Error::DegenerateKernel {
            floor: DEGENERATE_FLOOR,
        });
    }

    let dims = cfg.exclusive.len() - 1;
    if dims == 0 {
        let objective = pairs.eval(&[]);
        return Ok(MrcFit {
            b_free: Vec::new(),
            objective,
            level_best: vec![objective],
            resolution: 0.0,
        });
    }

    let points = cfg.grid.points;
    let mut center = vec![0.0; dims];
    let mut halfwidth = cfg.grid.halfwidth;
    let mut best = center.clone();
    let mut best_value = f64::NEG_INFINITY;
    let mut level_best = Vec::with_capacity(cfg.grid.levels);
    let mut spacing = 0.0;
    for _ in 0..cfg.grid.levels {
        spacing = 2.0 * halfwidth / (points - 1) as f64;
        let axes: Vec<Vec<f64>> = center
            .iter()
            .map(|&c| (0..points).map(|k| c - halfwidth + spacing * k as f64).collect())
            .collect();
        let mut index = vec![0usize; dims];
        loop {
            let b: Vec<f64> = index.iter().zip(&axes).map(|(&k, axis)| axis[k]).collect();
            let value = pairs.eval(&b);
            if value > best_value {
                best_value = value;
                best = b;
            }
            let mut d = dims;
            loop {
                if d == 0 {
                    break;
                }
                d -= 1;
                index[d] += 1;
                if index[d] < points {
                    break;
                }
                index[d] = 0;
            }
            if index.iter().all(|&k| k == 0) {
                break;
            }
        }
        level_best.push(best_value);
        center = best.clone();
        halfwidth = 2.0 * spacing;
    }

    Ok(MrcFit {
        b_free: best,
        objective: best_value,
        level_best,
        resolution: spacing,
    })
}
