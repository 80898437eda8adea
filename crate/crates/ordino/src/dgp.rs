//! Data generation: three built-in benchmark designs plus a general simulator
//! that pushes latent index-plus-noise draws through a threshold structure.
//!
//! Rows are produced in blocks of `BLOCK` observations, each block from its
//! own sub-stream `stream(seed, block_index)`, so blocks can be generated in
//! parallel while the assembled dataset is identical to a sequential pass.
//! Within an observation the draw order is fixed: covariate columns in
//! declaration order (a column entering both equations is drawn once), then
//! the correlated error pair. Fixtures built on a seed are therefore
//! bit-stable.

use rayon::prelude::*;

use crate::gauss::{sample_bvn, standard_normal};
use crate::likelihood::{Dataset, ModelParams};
use crate::model::{ResponseSpec, ThresholdStructure};
use crate::seed::{standard_uniform, stream};
use crate::{Error, Result};

/// Observations generated per seed sub-stream.
const BLOCK: usize = 1024;

/// Corner gaps beyond this break the tiling of the latent plane, so the
/// simulator refuses the structure up front.
const COHERENCY_TOL: f64 = 1e-9;

/// Marginal law of one simulated covariate column.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum CovariateLaw {
    /// Uniform on [lo, hi].
    Uniform { lo: f64, hi: f64 },
    /// Finite support with the given points and probabilities.
    Discrete { points: Vec<f64>, probs: Vec<f64> },
    /// Student t with `df` degrees of freedom, sampled as a standard normal
    /// over the square root of an independent chi-square divided by `df`.
    StudentT { df: u32 },
    /// Logistic with location and scale, sampled by inverse CDF.
    Logistic { loc: f64, scale: f64 },
}

impl CovariateLaw {
    fn validate(&self) -> Result<()> {
        match self {
            Self::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::InvalidParameter(format!(
                        "uniform law needs finite lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            Self::Discrete { points, probs } => {
                if points.is_empty() || points.len() != probs.len() {
                    return Err(Error::InvalidParameter(
                        "discrete law needs matching non-empty points and probs".into(),
                    ));
                }
                if points.iter().any(|p| !p.is_finite()) || probs.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidParameter(
                        "discrete law needs finite points and non-negative probs".into(),
                    ));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "discrete law probabilities sum to {total}, not 1"
                    )));
                }
            }
            Self::StudentT { df } => {
                if *df == 0 {
                    return Err(Error::InvalidParameter(
                        "student t law needs df >= 1".into(),
                    ));
                }
            }
            Self::Logistic { loc, scale } => {
                if !loc.is_finite() || !scale.is_finite() || *scale <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "logistic law needs finite loc and scale > 0, got ({loc}, {scale})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw<R: rand_core::RngCore>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Uniform { lo, hi } => lo + (hi - lo) * standard_uniform(rng),
            Self::Discrete { points, probs } => {
                let u = standard_uniform(rng);
                let mut cum = 0.0;
                for (point, p) in points.iter().zip(probs) {
                    cum += p;
                    if u <= cum {
                        return *point;
                    }
                }
                *points.last().unwrap()
            }
            Self::StudentT { df } => {
                let z = standard_normal(rng);
                let mut chi2 = 0.0;
                for _ in 0..*df {
                    let w = standard_normal(rng);
                    chi2 += w * w;
                }
                z / (chi2 / f64::from(*df)).sqrt()
            }
            Self::Logistic { loc, scale } => {
                let u = standard_uniform(rng);
                loc + scale * (u / (1.0 - u)).ln()
            }
        }
    }
}

/// One simulated covariate column and the equations it enters. A column with
/// both flags set is drawn once and shared by the two indices.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Column {
    pub name: String,
    pub law: CovariateLaw,
    pub in_eq1: bool,
    pub in_eq2: bool,
}

/// Full data-generating specification: covariate columns plus model
/// parameters. `params.beta1` lines up with the equation-1 columns in
/// declaration order, `params.beta2` with the equation-2 columns.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DesignConfig {
    pub columns: Vec<Column>,
    pub params: ModelParams,
}

impl DesignConfig {
    pub fn new(columns: Vec<Column>, params: ModelParams) -> Result<Self> {
        let config = Self { columns, params };
        config.validate()?;
        Ok(config)
    }

    /// Number of equation-1 covariates.
    pub fn k1(&self) -> usize {
        self.columns.iter().filter(|c| c.in_eq1).count()
    }

    /// Number of equation-2 covariates.
    pub fn k2(&self) -> usize {
        self.columns.iter().filter(|c| c.in_eq2).count()
    }

    pub fn validate(&self) -> Result<()> {
        for col in &self.columns {
            col.law.validate()?;
            if !col.in_eq1 && !col.in_eq2 {
                return Err(Error::InvalidParameter(format!(
                    "column {} enters neither equation",
                    col.name
                )));
            }
        }
        for (i, col) in self.columns.iter().enumerate() {
            if self.columns[..i].iter().any(|c| c.name == col.name) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate column name {}",
                    col.name
                )));
            }
        }
        if self.params.beta1.len() != self.k1() || self.params.beta2.len() != self.k2() {
            return Err(Error::DimensionMismatch(format!(
                "{} equation-1 and {} equation-2 columns, but {} and {} slopes",
                self.k1(),
                self.k2(),
                self.params.beta1.len(),
                self.params.beta2.len()
            )));
        }
        let violations = self.params.thresholds.coherency_violations(COHERENCY_TOL);
        if let Some(&(j1, j2, _)) = violations.first() {
            return Err(Error::Incoherent {
                count: violations.len(),
                j1,
                j2,
            });
        }
        Ok(())
    }
}

/// Built-in benchmark design `id`:
///
/// 1. 2x2 structure, one shared covariate x ~ U[-5,5], slopes (1, 0.5),
///    rho = 0.33;
/// 2. 4x3 structure, shared x ~ U[-3,3] plus a four-point discrete covariate
///    exclusive to equation 1, slopes (1.5, -4 | 3), rho = 0.5;
/// 3. 7x2 structure, shared x ~ U[-2,2], t(5) covariates exclusive to each
///    equation and a logistic(2,1) covariate in equation 2, slopes
///    (1.5, -4 | 3, -6, 1), rho = 0.5.
pub fn design(id: u8) -> Result<DesignConfig> {
    match id {
        1 => design1(0.5),
        2 => {
            let spec = ResponseSpec::new(4, 3)?;
            let thresholds = ThresholdStructure::from_interior(
                spec,
                &[
                    vec![-3.25, -3.25, -0.5],
                    vec![0.5, 1.0, 5.0],
                    vec![8.0, 8.0, 8.0],
                ],
                &[vec![-4.0, -2.0, -2.0, 0.0], vec![0.5, 0.5, 0.5, 4.0]],
            )?;
            DesignConfig::new(
                vec![
                    shared("x", CovariateLaw::Uniform { lo: -3.0, hi: 3.0 }),
                    eq1_only(
                        "w1",
                        CovariateLaw::Discrete {
                            points: vec![-2.5, -1.5, -0.5, 0.5],
                            probs: vec![0.25; 4],
                        },
                    ),
                ],
                ModelParams::new(vec![1.5, -4.0], vec![3.0], thresholds, 0.5)?,
            )
        }
        3 => {
            let spec = ResponseSpec::new(7, 2)?;
            let thresholds = ThresholdStructure::from_interior(
                spec,
                &[
                    vec![-8.0, -8.0],
                    vec![-5.0, 0.0],
                    vec![0.5, 0.5],
                    vec![2.0, 2.0],
                    vec![3.0, 3.0],
                    vec![3.5, 8.0],
                ],
                &[vec![-4.0, -2.0, -2.0, 1.0, 3.0, 7.0, 7.0]],
            )?;
            DesignConfig::new(
                vec![
                    shared("x", CovariateLaw::Uniform { lo: -2.0, hi: 2.0 }),
                    eq1_only("w1", CovariateLaw::StudentT { df: 5 }),
                    eq2_only("w2", CovariateLaw::StudentT { df: 5 }),
                    eq2_only(
                        "z2",
                        CovariateLaw::Logistic {
                            loc: 2.0,
                            scale: 1.0,
                        },
                    ),
                ],
                ModelParams::new(vec![1.5, -4.0], vec![3.0, -6.0, 1.0], thresholds, 0.5)?,
            )
        }
        _ => Err(Error::InvalidParameter(format!(
            "unknown design id {id}, expected 1, 2 or 3"
        ))),
    }
}

/// Variant of design 1 with the second slope at 1 instead of 0.5.
pub fn design1_alt() -> Result<DesignConfig> {
    design1(1.0)
}

fn design1(beta2: f64) -> Result<DesignConfig> {
    let spec = ResponseSpec::new(2, 2)?;
    let thresholds =
        ThresholdStructure::from_interior(spec, &[vec![-2.0, 1.5]], &[vec![1.0, 1.0]])?;
    DesignConfig::new(
        vec![shared("x", CovariateLaw::Uniform { lo: -5.0, hi: 5.0 })],
        ModelParams::new(vec![1.0], vec![beta2], thresholds, 0.33)?,
    )
}

fn shared(name: &str, law: CovariateLaw) -> Column {
    Column {
        name: name.into(),
        law,
        in_eq1: true,
        in_eq2: true,
    }
}

fn eq1_only(name: &str, law: CovariateLaw) -> Column {
    Column {
        name: name.into(),
        law,
        in_eq1: true,
        in_eq2: false,
    }
}

fn eq2_only(name: &str, law: CovariateLaw) -> Column {
    Column {
        name: name.into(),
        law,
        in_eq1: false,
        in_eq2: true,
    }
}

/// Finds the cell of the latent point under the half-open convention
/// (lo, hi] in both dimensions. Membership must be tested against both grids
/// jointly: with threshold entries varying across the other dimension it is
/// not separable into two univariate searches.
pub fn assign_response(ts: &ThresholdStructure, ystar1: f64, ystar2: f64) -> Result<(u32, u32)> {
    for (j1, j2) in ts.spec().cells() {
        let ((l1, u1), (l2, u2)) = ts.cell_bounds(j1, j2);
        if l1 < ystar1 && ystar1 <= u1 && l2 < ystar2 && ystar2 <= u2 {
            return Ok((j1 as u32, j2 as u32));
        }
    }
    Err(Error::InvalidStructure(format!(
        "no cell contains the latent point ({ystar1}, {ystar2}); cells do not tile the plane"
    )))
}

struct Block {
    y1: Vec<u32>,
    y2: Vec<u32>,
    x1: Vec<f64>,
    x2: Vec<f64>,
}

/// Simulates `n` observations from `config` under `seed`. Deterministic:
/// the same arguments always produce the same dataset.
pub fn simulate(config: &DesignConfig, n: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("simulate needs n >= 1".into()));
    }
    let blocks: Vec<Block> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let rows = BLOCK.min(n - b * BLOCK);
            simulate_block(config, rows, seed, b as u64)
        })
        .collect::<Result<_>>()?;

    let (k1, k2) = (config.k1(), config.k2());
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    let mut x1 = Vec::with_capacity(n * k1);
    let mut x2 = Vec::with_capacity(n * k2);
    for block in blocks {
        y1.extend(block.y1);
        y2.extend(block.y2);
        x1.extend(block.x1);
        x2.extend(block.x2);
    }
    Dataset::new(y1, y2, x1, k1, x2, k2)
}

fn simulate_block(config: &DesignConfig, rows: usize, seed: u64, index: u64) -> Result<Block> {
    let params = &config.params;
    let mut rng = stream(seed, index);
    let mut block = Block {
        y1: Vec::with_capacity(rows),
        y2: Vec::with_capacity(rows),
        x1: Vec::with_capacity(rows * config.k1()),
        x2: Vec::with_capacity(rows * config.k2()),
    };
    for _ in 0..rows {
        let mut v1 = 0.0;
        let mut v2 = 0.0;
        let mut c1 = 0;
        let mut c2 = 0;
        for col in &config.columns {
            let value = col.law.draw(&mut rng);
            if col.in_eq1 {
                v1 += params.beta1[c1] * value;
                c1 += 1;
                block.x1.push(value);
            }
            if col.in_eq2 {
                v2 += params.beta2[c2] * value;
                c2 += 1;
                block.x2.push(value);
            }
        }
        let (e1, e2) = sample_bvn(params.rho, &mut rng);
        let (j1, j2) = assign_response(&params.thresholds, v1 + e1, v2 + e2)?;
        block.y1.push(j1);
        block.y2.push(j2);
    }
    Ok(block)
}
