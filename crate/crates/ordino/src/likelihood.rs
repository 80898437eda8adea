//! Cell probabilities, log-likelihood, analytic scores, the coherency
//! penalty and the corner constraints.
//!
//! The probability of cell (j1, j2) at indices v1 = x1'b1, v2 = x2'b2 is the
//! rectangle probability
//!
//! p = F(u1, u2) - F(l1, u2) - F(u1, l2) + F(l1, l2),
//!
//! where F is the bivariate normal CDF with correlation rho, u1/l1 are the
//! cell's dimension-1 bounds minus v1 and u2/l2 the dimension-2 bounds minus
//! v2. The mean log-likelihood clamps p at the floor 1e-12 before logging.
//!
//! The full coordinate vector ordering used by [`score`] and
//! [`constraint_jacobian`] is: beta1 (k1), beta2 (k2), every interior
//! threshold entry in [`interior_entries`] order, rho. Tied storage cells are
//! the estimation layer's concern; here every grid entry is an independent
//! coordinate.

use rayon::prelude::*;

use crate::gauss::{bvn_cdf, bvn_pdf, norm_pdf, std_normal_cdf};
use crate::model::{interior_entries, EntryId, ResponseSpec, ThresholdStructure};
use crate::{Error, Result};

/// Probabilities below this floor are clamped before logging.
pub const PROB_FLOOR: f64 = 1e-12;

const CHUNK: usize = 4096;

/// Index parameters of the bivariate model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub thresholds: ThresholdStructure,
    pub rho: f64,
}

impl ModelParams {
    pub fn new(
        beta1: Vec<f64>,
        beta2: Vec<f64>,
        thresholds: ThresholdStructure,
        rho: f64,
    ) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::InvalidParameter(format!(
                "correlation {rho} outside [-1, 1]"
            )));
        }
        if beta1.iter().chain(&beta2).any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("slopes must be finite".into()));
        }
        Ok(Self {
            beta1,
            beta2,
            thresholds,
            rho,
        })
    }
}

/// Observations: 1-based response pairs and row-major covariate blocks.
/// Either block may have zero columns (pure threshold model).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    y1: Vec<u32>,
    y2: Vec<u32>,
    x1: Vec<f64>,
    x2: Vec<f64>,
    k1: usize,
    k2: usize,
    n: usize,
}

impl Dataset {
    pub fn new(
        y1: Vec<u32>,
        y2: Vec<u32>,
        x1: Vec<f64>,
        k1: usize,
        x2: Vec<f64>,
        k2: usize,
    ) -> Result<Self> {
        let n = y1.len();
        if y2.len() != n || x1.len() != n * k1 || x2.len() != n * k2 {
            return Err(Error::DimensionMismatch(format!(
                "y1 {}, y2 {}, x1 {}x{k1}, x2 {}x{k2}",
                n,
                y2.len(),
                x1.len() / k1.max(1),
                x2.len() / k2.max(1)
            )));
        }
        if y1.iter().chain(&y2).any(|&y| y == 0) {
            return Err(Error::Data("responses are 1-based; found 0".into()));
        }
        if x1.iter().chain(&x2).any(|v| !v.is_finite()) {
            return Err(Error::Data("covariates must be finite".into()));
        }
        Ok(Self {
            y1,
            y2,
            x1,
            x2,
            k1,
            k2,
            n,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn k1(&self) -> usize {
        self.k1
    }
    pub fn k2(&self) -> usize {
        self.k2
    }
    pub fn y1(&self) -> &[u32] {
        &self.y1
    }
    pub fn y2(&self) -> &[u32] {
        &self.y2
    }
    pub fn x1_row(&self, i: usize) -> &[f64] {
        &self.x1[i * self.k1..(i + 1) * self.k1]
    }
    pub fn x2_row(&self, i: usize) -> &[f64] {
        &self.x2[i * self.k2..(i + 1) * self.k2]
    }

    /// Checks categories against `spec`: all in range and every category of
    /// both dimensions observed at least once.
    pub fn validate_categories(&self, spec: ResponseSpec) -> Result<()> {
        let mut seen1 = vec![false; spec.m1];
        let mut seen2 = vec![false; spec.m2];
        for i in 0..self.n {
            for (dim, (y, m, seen)) in [
                (self.y1[i], spec.m1, &mut seen1),
                (self.y2[i], spec.m2, &mut seen2),
            ]
            .into_iter()
            .enumerate()
            {
                if y as usize > m {
                    return Err(Error::ResponseOutOfRange {
                        dim: dim + 1,
                        value: y,
                        m,
                        row: i,
                    });
                }
                seen[y as usize - 1] = true;
            }
        }
        for (dim, seen) in [&seen1, &seen2].into_iter().enumerate() {
            if let Some(cat) = seen.iter().position(|s| !s) {
                return Err(Error::MissingCategory {
                    dim: dim + 1,
                    category: cat + 1,
                });
            }
        }
        Ok(())
    }
}

/// Ordering of the full (non-lattice) coordinate vector: beta1, beta2,
/// interior thresholds in canonical entry order, rho.
#[derive(Clone, Debug)]
pub struct CoordLayout {
    pub spec: ResponseSpec,
    pub k1: usize,
    pub k2: usize,
    entries: Vec<EntryId>,
}

impl CoordLayout {
    pub fn new(spec: ResponseSpec, k1: usize, k2: usize) -> Self {
        Self {
            spec,
            k1,
            k2,
            entries: interior_entries(spec),
        }
    }

    pub fn len(&self) -> usize {
        self.k1 + self.k2 + self.entries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta1(&self, c: usize) -> usize {
        debug_assert!(c < self.k1);
        c
    }

    pub fn beta2(&self, c: usize) -> usize {
        debug_assert!(c < self.k2);
        self.k1 + c
    }

    /// Position of interior threshold entry `idx` (index into `entries()`).
    pub fn threshold(&self, idx: usize) -> usize {
        self.k1 + self.k2 + idx
    }

    pub fn rho(&self) -> usize {
        self.len() - 1
    }

    pub fn entries(&self) -> &[EntryId] {
        &self.entries
    }

    pub fn entry_offset(&self, id: EntryId) -> usize {
        self.threshold(self.entries.binary_search(&id).expect("interior entry"))
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for c in 0..self.k1 {
            out.push(format!("beta1[{c}]"));
        }
        for c in 0..self.k2 {
            out.push(format!("beta2[{c}]"));
        }
        for id in &self.entries {
            out.push(id.to_string());
        }
        out.push("rho".into());
        out
    }
}

fn dot(x: &[f64], b: &[f64]) -> f64 {
    x.iter().zip(b).map(|(xi, bi)| xi * bi).sum()
}

/// Probability of cell (j1, j2) for one observation.
pub fn cell_prob(params: &ModelParams, x1: &[f64], x2: &[f64], j1: usize, j2: usize) -> f64 {
    let v1 = dot(x1, &params.beta1);
    let v2 = dot(x2, &params.beta2);
    cell_prob_at(&params.thresholds, v1, v2, params.rho, j1, j2)
}

pub(crate) fn cell_prob_at(
    ts: &ThresholdStructure,
    v1: f64,
    v2: f64,
    rho: f64,
    j1: usize,
    j2: usize,
) -> f64 {
    let ((lo1, hi1), (lo2, hi2)) = ts.cell_bounds(j1, j2);
    let (u1, l1) = (hi1 - v1, lo1 - v1);
    let (u2, l2) = (hi2 - v2, lo2 - v2);
    bvn_cdf(u1, u2, rho) - bvn_cdf(l1, u2, rho) - bvn_cdf(u1, l2, rho) + bvn_cdf(l1, l2, rho)
}

/// All cell probabilities for one observation, indexed [j1-1][j2-1].
pub fn cell_prob_matrix(params: &ModelParams, x1: &[f64], x2: &[f64]) -> Vec<Vec<f64>> {
    let spec = params.thresholds.spec();
    let v1 = dot(x1, &params.beta1);
    let v2 = dot(x2, &params.beta2);
    (1..=spec.m1)
        .map(|j1| {
            (1..=spec.m2)
                .map(|j2| cell_prob_at(&params.thresholds, v1, v2, params.rho, j1, j2))
                .collect()
        })
        .collect()
}

/// Per-observation cell terms: probability and its partials with respect to
/// the four bounds and rho. Requires |rho| < 1 for the partials.
struct CellTerms {
    p: f64,
    d_u1: f64,
    d_l1: f64,
    d_u2: f64,
    d_l2: f64,
    d_rho: f64,
}

fn cell_terms(
    ts: &ThresholdStructure,
    v1: f64,
    v2: f64,
    rho: f64,
    j1: usize,
    j2: usize,
    want_grad: bool,
) -> CellTerms {
    let ((lo1, hi1), (lo2, hi2)) = ts.cell_bounds(j1, j2);
    let (u1, l1) = (hi1 - v1, lo1 - v1);
    let (u2, l2) = (hi2 - v2, lo2 - v2);
    let p = bvn_cdf(u1, u2, rho) - bvn_cdf(l1, u2, rho) - bvn_cdf(u1, l2, rho)
        + bvn_cdf(l1, l2, rho);
    if !want_grad {
        return CellTerms {
            p,
            d_u1: 0.0,
            d_l1: 0.0,
            d_u2: 0.0,
            d_l2: 0.0,
            d_rho: 0.0,
        };
    }
    let inv_s = 1.0 / ((1.0 - rho) * (1.0 + rho)).sqrt();
    // d/da F(a, b) = pdf(a) * cdf((b - rho a) / s); infinite a kills the term,
    // infinite b saturates the inner cdf.
    let slice = |a: f64, hi: f64, lo: f64| -> f64 {
        if !a.is_finite() {
            return 0.0;
        }
        let pa = norm_pdf(a);
        if pa == 0.0 {
            return 0.0;
        }
        let up = std_normal_cdf((hi - rho * a) * inv_s);
        let dn = std_normal_cdf((lo - rho * a) * inv_s);
        pa * (up - dn)
    };
    CellTerms {
        p,
        d_u1: slice(u1, u2, l2),
        d_l1: -slice(l1, u2, l2),
        d_u2: slice(u2, u1, l1),
        d_l2: -slice(l2, u1, l1),
        d_rho: bvn_pdf(u1, u2, rho) - bvn_pdf(l1, u2, rho) - bvn_pdf(u1, l2, rho)
            + bvn_pdf(l1, l2, rho),
    }
}

/// Mean log-likelihood (1/N) sum_i ln max(p_i, 1e-12). Summation is chunked
/// and combined in chunk order, so the value is identical for any thread
/// count. Panics if a response is outside the threshold grids' range.
pub fn loglik(params: &ModelParams, data: &Dataset) -> f64 {
    let ts = &params.thresholds;
    let partials: Vec<f64> = (0..data.n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(data.n);
            let mut acc = 0.0;
            for i in lo..hi {
                let v1 = dot(data.x1_row(i), &params.beta1);
                let v2 = dot(data.x2_row(i), &params.beta2);
                let p = cell_prob_at(ts, v1, v2, params.rho, data.y1[i] as usize, data.y2[i] as usize);
                acc += p.max(PROB_FLOOR).ln();
            }
            acc
        })
        .collect();
    partials.iter().sum::<f64>() / data.n as f64
}

/// Gradient of [`loglik`] over the full coordinate vector (see
/// [`CoordLayout`]). Clamped observations (p below the floor) keep their raw
/// probability gradient scaled by the floored denominator, so ascent still
/// pushes them upward. Requires |rho| < 1.
pub fn score(params: &ModelParams, data: &Dataset) -> Vec<f64> {
    loglik_and_score(params, data).1
}

/// Fused mean log-likelihood and score pass.
pub fn loglik_and_score(params: &ModelParams, data: &Dataset) -> (f64, Vec<f64>) {
    let spec = params.thresholds.spec();
    let layout = CoordLayout::new(spec, data.k1, data.k2);
    let dim = layout.len();
    let partials: Vec<(f64, Vec<f64>)> = (0..data.n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(data.n);
            let mut acc = 0.0;
            let mut grad = vec![0.0; dim];
            for i in lo..hi {
                acc += accumulate_obs(params, data, &layout, i, &mut grad);
            }
            (acc, grad)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for (acc, g) in &partials {
        total += acc;
        for (gi, pi) in grad.iter_mut().zip(g) {
            *gi += pi;
        }
    }
    let inv_n = 1.0 / data.n as f64;
    for gi in grad.iter_mut() {
        *gi *= inv_n;
    }
    (total * inv_n, grad)
}

/// Adds observation i's score contribution (unnormalized) into `grad` and
/// returns its clamped log-probability term.
fn accumulate_obs(
    params: &ModelParams,
    data: &Dataset,
    layout: &CoordLayout,
    i: usize,
    grad: &mut [f64],
) -> f64 {
    let spec = params.thresholds.spec();
    let (j1, j2) = (data.y1[i] as usize, data.y2[i] as usize);
    let x1 = data.x1_row(i);
    let x2 = data.x2_row(i);
    let v1 = dot(x1, &params.beta1);
    let v2 = dot(x2, &params.beta2);
    let t = cell_terms(&params.thresholds, v1, v2, params.rho, j1, j2, true);
    let w = 1.0 / t.p.max(PROB_FLOOR);

    let c1 = -(t.d_u1 + t.d_l1) * w;
    for (c, xv) in x1.iter().enumerate() {
        grad[layout.beta1(c)] += c1 * xv;
    }
    let c2 = -(t.d_u2 + t.d_l2) * w;
    for (c, xv) in x2.iter().enumerate() {
        grad[layout.beta2(c)] += c2 * xv;
    }
    if j1 < spec.m1 {
        grad[layout.entry_offset(EntryId { dim: 1, j1, j2 })] += t.d_u1 * w;
    }
    if j1 > 1 {
        grad[layout.entry_offset(EntryId {
            dim: 1,
            j1: j1 - 1,
            j2,
        })] += t.d_l1 * w;
    }
    if j2 < spec.m2 {
        grad[layout.entry_offset(EntryId { dim: 2, j1, j2 })] += t.d_u2 * w;
    }
    if j2 > 1 {
        grad[layout.entry_offset(EntryId {
            dim: 2,
            j1,
            j2: j2 - 1,
        })] += t.d_l2 * w;
    }
    grad[layout.rho()] += t.d_rho * w;
    t.p.max(PROB_FLOOR).ln()
}

/// Streams each observation's per-observation score (gradient of its own
/// log-probability) through `f`; used for the outer-product information
/// matrix. The scratch slice is reused across calls.
pub(crate) fn for_each_obs_score<F: FnMut(usize, &[f64])>(
    params: &ModelParams,
    data: &Dataset,
    layout: &CoordLayout,
    mut f: F,
) {
    let mut scratch = vec![0.0; layout.len()];
    for i in 0..data.n {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        accumulate_obs(params, data, layout, i, &mut scratch);
        f(i, &scratch);
    }
}

/// Coherency penalty: -lambda * sum over interior corners of
/// (A1[j1][j2+1] - A1[j1][j2])^2 * (A2[j1+1][j2] - A2[j1][j2])^2.
/// Zero exactly on coherent structures.
pub fn penalty(ts: &ThresholdStructure, lambda: f64) -> f64 {
    let spec = ts.spec();
    let mut acc = 0.0;
    for j1 in 1..spec.m1 {
        for j2 in 1..spec.m2 {
            let d1 = ts.a1(j1, j2 + 1) - ts.a1(j1, j2);
            let d2 = ts.a2(j1 + 1, j2) - ts.a2(j1, j2);
            acc += d1 * d1 * d2 * d2;
        }
    }
    -lambda * acc
}

/// Gradient of [`penalty`] with respect to each interior entry, aligned with
/// [`interior_entries`] order.
pub fn penalty_grad_entries(ts: &ThresholdStructure, lambda: f64) -> Vec<f64> {
    let spec = ts.spec();
    let entries = interior_entries(spec);
    let pos = |id: EntryId| entries.binary_search(&id).expect("interior entry");
    let mut grad = vec![0.0; entries.len()];
    for j1 in 1..spec.m1 {
        for j2 in 1..spec.m2 {
            let d1 = ts.a1(j1, j2 + 1) - ts.a1(j1, j2);
            let d2 = ts.a2(j1 + 1, j2) - ts.a2(j1, j2);
            let g1 = -lambda * 2.0 * d1 * d2 * d2;
            let g2 = -lambda * 2.0 * d1 * d1 * d2;
            grad[pos(EntryId { dim: 1, j1, j2: j2 + 1 })] += g1;
            grad[pos(EntryId { dim: 1, j1, j2 })] -= g1;
            grad[pos(EntryId { dim: 2, j1: j1 + 1, j2 })] += g2;
            grad[pos(EntryId { dim: 2, j1, j2 })] -= g2;
        }
    }
    grad
}

/// Corner constraints r(theta): one product (A1[j1][j2+1] - A1[j1][j2]) *
/// (A2[j1+1][j2] - A2[j1][j2]) per interior corner, j1 major. All zero iff
/// the structure is coherent (tol 0).
pub fn constraint_vector(ts: &ThresholdStructure) -> Vec<f64> {
    let spec = ts.spec();
    let mut out = Vec::with_capacity((spec.m1 - 1).saturating_mul(spec.m2 - 1));
    for j1 in 1..spec.m1 {
        for j2 in 1..spec.m2 {
            let d1 = ts.a1(j1, j2 + 1) - ts.a1(j1, j2);
            let d2 = ts.a2(j1 + 1, j2) - ts.a2(j1, j2);
            out.push(d1 * d2);
        }
    }
    out
}

/// Jacobian of [`constraint_vector`] with respect to the interior threshold
/// entries (columns in [`interior_entries`] order). Columns for slopes and
/// rho are identically zero and omitted.
pub fn constraint_jacobian(ts: &ThresholdStructure) -> Vec<Vec<f64>> {
    let spec = ts.spec();
    let entries = interior_entries(spec);
    let pos = |id: EntryId| entries.binary_search(&id).expect("interior entry");
    let mut rows = Vec::new();
    for j1 in 1..spec.m1 {
        for j2 in 1..spec.m2 {
            let d1 = ts.a1(j1, j2 + 1) - ts.a1(j1, j2);
            let d2 = ts.a2(j1 + 1, j2) - ts.a2(j1, j2);
            let mut row = vec![0.0; entries.len()];
            row[pos(EntryId { dim: 1, j1, j2: j2 + 1 })] += d2;
            row[pos(EntryId { dim: 1, j1, j2 })] -= d2;
            row[pos(EntryId { dim: 2, j1: j1 + 1, j2 })] += d1;
            row[pos(EntryId { dim: 2, j1, j2 })] -= d1;
            rows.push(row);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{bvn_cdf_oracle, sample_bvn};
    use crate::model::random_coherent_structure;
    use crate::seed::{standard_uniform, stream};

    fn spec(m1: usize, m2: usize) -> ResponseSpec {
        ResponseSpec::new(m1, m2).unwrap()
    }

    fn design1_thresholds() -> ThresholdStructure {
        ThresholdStructure::from_interior(
            spec(2, 2),
            &[vec![-2.0, 1.5]],
            &[vec![1.0, 1.0]],
        )
        .unwrap()
    }

    /// 3x3 coherent structure with no full-spanning first split.
    fn pinwheel() -> ThresholdStructure {
        ThresholdStructure::from_interior(
            spec(3, 3),
            &[vec![1.0, 1.0, 2.0], vec![2.0, 3.0, 3.0]],
            &[vec![0.0, 1.0, 1.0], vec![2.0, 2.0, 3.0]],
        )
        .unwrap()
    }

    fn no_covariate_data(y1: Vec<u32>, y2: Vec<u32>) -> Dataset {
        Dataset::new(y1, y2, vec![], 0, vec![], 0).unwrap()
    }

    #[test]
    fn lattice_at_zero_splits_into_quarters() {
        let ts = ThresholdStructure::lattice(spec(2, 2), &[0.0], &[0.0]).unwrap();
        let params = ModelParams::new(vec![], vec![], ts, 0.0).unwrap();
        let probs = cell_prob_matrix(&params, &[], &[]);
        for row in &probs {
            for &p in row {
                assert!((p - 0.25).abs() < 1e-15, "{p}");
            }
        }
    }

    #[test]
    fn cell_probability_matches_quadrature_oracle() {
        let params = ModelParams::new(vec![1.0], vec![0.5], design1_thresholds(), 0.33).unwrap();
        // Cell (1, 1) at x = 0 is the quadrant below (-2, 1).
        let p = cell_prob(&params, &[0.0], &[0.0], 1, 1);
        assert!((p - bvn_cdf_oracle(-2.0, 1.0, 0.33)).abs() < 1e-10);
        // A cell with four finite corners: pinwheel (2, 2) is (1, 3] x (1, 2].
        let params = ModelParams::new(vec![1.0], vec![0.5], pinwheel(), 0.33).unwrap();
        let (v1, v2) = (0.8, -0.2 * 0.5);
        let f = |a: f64, b: f64| bvn_cdf_oracle(a - v1, b - v2, 0.33);
        let want = f(3.0, 2.0) - f(1.0, 2.0) - f(3.0, 1.0) + f(1.0, 1.0);
        let p = cell_prob(&params, &[0.8], &[-0.2], 2, 2);
        assert!((p - want).abs() < 1e-10, "{p} vs {want}");
    }

    #[test]
    fn single_cell_model_has_unit_probability() {
        let ts = ThresholdStructure::from_interior(spec(1, 1), &[], &[]).unwrap();
        let params = ModelParams::new(vec![], vec![], ts, 0.4).unwrap();
        assert_eq!(cell_prob_matrix(&params, &[], &[]), vec![vec![1.0]]);
    }

    #[test]
    fn probabilities_tile_the_plane() {
        let mut rng = stream(0x11ce, 0);
        for trial in 0..20 {
            let s = if trial % 2 == 0 { spec(4, 3) } else { spec(2, 2) };
            let ts = random_coherent_structure(s, (-2.0, 2.0), &mut rng);
            for _ in 0..5 {
                let rho = 1.8 * standard_uniform(&mut rng) - 0.9;
                let v1 = 3.0 * standard_uniform(&mut rng) - 1.5;
                let v2 = 3.0 * standard_uniform(&mut rng) - 1.5;
                let params =
                    ModelParams::new(vec![v1], vec![v2], ts.clone(), rho).unwrap();
                let probs = cell_prob_matrix(&params, &[1.0], &[1.0]);
                let mut total = 0.0;
                for row in &probs {
                    for &p in row {
                        assert!(p > -1e-12, "negative cell probability {p}");
                        total += p;
                    }
                }
                assert!((total - 1.0).abs() < 1e-12, "cells sum to {total}");
            }
        }
    }

    #[test]
    fn loglik_of_one_observation_is_its_log_probability() {
        let params = ModelParams::new(vec![1.0], vec![0.5], design1_thresholds(), 0.33).unwrap();
        let data = Dataset::new(vec![2], vec![1], vec![0.3], 1, vec![-0.7], 1).unwrap();
        let p = cell_prob(&params, &[0.3], &[-0.7], 2, 1);
        assert_eq!(loglik(&params, &data), p.ln());
    }

    #[test]
    fn loglik_is_stable_under_duplication() {
        let params = ModelParams::new(vec![1.0], vec![0.5], design1_thresholds(), 0.33).unwrap();
        let mut rng = stream(0x11ce, 1);
        let n = 12;
        let mut y1 = Vec::new();
        let mut y2 = Vec::new();
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        for _ in 0..n {
            y1.push(1 + (standard_uniform(&mut rng) * 2.0) as u32);
            y2.push(1 + (standard_uniform(&mut rng) * 2.0) as u32);
            x1.push(2.0 * standard_uniform(&mut rng) - 1.0);
            x2.push(2.0 * standard_uniform(&mut rng) - 1.0);
        }
        let single = Dataset::new(y1.clone(), y2.clone(), x1.clone(), 1, x2.clone(), 1).unwrap();
        y1.extend_from_within(..);
        y2.extend_from_within(..);
        x1.extend_from_within(..);
        x2.extend_from_within(..);
        let doubled = Dataset::new(y1, y2, x1, 1, x2, 1).unwrap();
        let (a, b) = (loglik(&params, &single), loglik(&params, &doubled));
        assert!((a - b).abs() <= 1e-14 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn loglik_clamps_vanishing_probabilities() {
        let ts = ThresholdStructure::lattice(spec(2, 2), &[0.0], &[0.0]).unwrap();
        let params = ModelParams::new(vec![1.0], vec![1.0], ts, 0.0).unwrap();
        // y1 = 1 at index 50 leaves mass ~ Phi(-50), far below the floor.
        let data = Dataset::new(vec![1], vec![2], vec![50.0], 1, vec![0.0], 1).unwrap();
        assert_eq!(loglik(&params, &data), PROB_FLOOR.ln());
    }

    /// Central finite differences over every coordinate of the full layout.
    fn assert_score_matches_fd(params: &ModelParams, data: &Dataset, tol: f64) {
        let layout = CoordLayout::new(params.thresholds.spec(), data.k1(), data.k2());
        let analytic = score(params, data);
        assert_eq!(analytic.len(), layout.len());
        // The CDF carries ~1e-15 absolute error, so ln p is only good to
        // ~1e-15 / p; tiny cells would drown the difference quotient. Guard
        // the precondition, then h = 1e-5 balances truncation against noise.
        for i in 0..data.n() {
            let p = cell_prob(
                params,
                data.x1_row(i),
                data.x2_row(i),
                data.y1()[i] as usize,
                data.y2()[i] as usize,
            );
            assert!(p > 1e-4, "test setup put observation {i} in a tiny cell");
        }
        let h = 1e-5;
        let eval = |p: &ModelParams| loglik(p, data);
        for c in 0..layout.len() {
            let (mut up, mut dn) = (params.clone(), params.clone());
            if c < data.k1() {
                up.beta1[c] += h;
                dn.beta1[c] -= h;
            } else if c < data.k1() + data.k2() {
                up.beta2[c - data.k1()] += h;
                dn.beta2[c - data.k1()] -= h;
            } else if c == layout.rho() {
                up.rho += h;
                dn.rho -= h;
            } else {
                let id = layout.entries()[c - data.k1() - data.k2()];
                up.thresholds.set_entry(id, params.thresholds.entry(id) + h);
                dn.thresholds.set_entry(id, params.thresholds.entry(id) - h);
            }
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let err = (analytic[c] - fd).abs() / analytic[c].abs().max(1.0);
            assert!(
                err < tol,
                "coordinate {} ({}): analytic {} vs fd {}",
                c,
                layout.names()[c],
                analytic[c],
                fd
            );
        }
    }

    #[test]
    fn score_matches_central_differences() {
        // Three structures with generous gaps; observations avoid cells whose
        // probability would fall below the clamp floor (the score keeps its
        // raw gradient there by design, so differences would disagree).
        let wide = ThresholdStructure::from_interior(
            spec(3, 2),
            &[vec![-1.0, -0.5], vec![0.8, 1.2]],
            &[vec![-0.3, 0.2, 1.0]],
        )
        .unwrap();
        // Shares values across entries like the benchmark designs do, scaled
        // so every cell keeps moderate mass.
        let tied = ThresholdStructure::from_interior(
            spec(4, 3),
            &[
                vec![-0.975, -0.975, -0.15],
                vec![0.15, 0.3, 1.5],
                vec![2.4, 2.4, 2.4],
            ],
            &[vec![-1.2, -0.6, -0.6, 0.0], vec![0.15, 0.15, 0.15, 1.2]],
        )
        .unwrap();
        let mut rng = stream(0x11ce, 2);
        let cases: [(&ThresholdStructure, usize, f64); 10] = [
            (&wide, 0, 0.3),
            (&wide, 1, -0.45),
            (&wide, 2, 0.6),
            (&tied, 0, 0.3),
            (&tied, 1, -0.45),
            (&tied, 2, 0.05),
            (&design1_thresholds(), 0, 0.33),
            (&design1_thresholds(), 1, -0.6),
            (&pinwheel(), 0, 0.25),
            (&pinwheel(), 1, -0.3),
        ];
        for (ts, _, rho) in cases {
            let s = ts.spec();
            let (k1, k2) = (2, 1);
            let beta1 = vec![
                standard_uniform(&mut rng) - 0.5,
                standard_uniform(&mut rng) - 0.5,
            ];
            let beta2 = vec![standard_uniform(&mut rng) - 0.5];
            let params = ModelParams::new(beta1, beta2, ts.clone(), rho).unwrap();
            let n = 7;
            let mut y1 = Vec::new();
            let mut y2 = Vec::new();
            let mut x1 = Vec::new();
            let mut x2 = Vec::new();
            for _ in 0..n {
                let xr1: Vec<f64> = (0..k1)
                    .map(|_| 2.0 * standard_uniform(&mut rng) - 1.0)
                    .collect();
                let xr2: Vec<f64> = (0..k2)
                    .map(|_| 2.0 * standard_uniform(&mut rng) - 1.0)
                    .collect();
                // Redraw the cell until it has moderate mass; the largest
                // cell always qualifies, so this terminates.
                loop {
                    let j1 = 1 + (standard_uniform(&mut rng) * s.m1 as f64) as usize;
                    let j2 = 1 + (standard_uniform(&mut rng) * s.m2 as f64) as usize;
                    if cell_prob(&params, &xr1, &xr2, j1, j2) > 1e-3 {
                        y1.push(j1 as u32);
                        y2.push(j2 as u32);
                        break;
                    }
                }
                x1.extend(xr1);
                x2.extend(xr2);
            }
            let data = Dataset::new(y1, y2, x1, k1, x2, k2).unwrap();
            assert_score_matches_fd(&params, &data, 1e-6);
        }
    }

    #[test]
    fn balanced_two_category_data_has_zero_score() {
        // One ordinal dimension split at zero, two observations on each side:
        // the threshold score cancels and the correlation score vanishes
        // because every cell is unbounded in dimension 2.
        let ts = ThresholdStructure::from_interior(spec(2, 1), &[vec![0.0]], &[]).unwrap();
        let params = ModelParams::new(vec![], vec![], ts, 0.0).unwrap();
        let data = no_covariate_data(vec![1, 1, 2, 2], vec![1, 1, 1, 1]);
        let s = score(&params, &data);
        assert_eq!(s.len(), 2);
        for v in s {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn rho_score_sign_follows_data_correlation() {
        let ts = ThresholdStructure::lattice(spec(2, 2), &[0.0], &[0.0]).unwrap();
        let layout = CoordLayout::new(spec(2, 2), 0, 0);
        for (idx, true_rho) in [(3u64, 0.5), (4u64, -0.5)] {
            let mut rng = stream(0x11ce, idx);
            let mut y1 = Vec::new();
            let mut y2 = Vec::new();
            for _ in 0..4000 {
                let (z1, z2) = sample_bvn(true_rho, &mut rng);
                y1.push(if z1 <= 0.0 { 1 } else { 2 });
                y2.push(if z2 <= 0.0 { 1 } else { 2 });
            }
            let data = no_covariate_data(y1, y2);
            let params = ModelParams::new(vec![], vec![], ts.clone(), 0.0).unwrap();
            let s = score(&params, &data);
            assert!(
                s[layout.rho()] * true_rho > 0.0,
                "rho score {} under true correlation {true_rho}",
                s[layout.rho()]
            );
        }
    }

    #[test]
    fn penalty_is_zero_on_coherent_structures_and_matches_hand_value() {
        assert_eq!(penalty(&design1_thresholds(), 100.0), 0.0);
        assert_eq!(penalty(&pinwheel(), 100.0), 0.0);
        // Jumps of 0.7 in both grids at the single interior corner.
        let bad = ThresholdStructure::from_interior(
            spec(2, 2),
            &[vec![0.0, 0.7]],
            &[vec![0.0, 0.7]],
        )
        .unwrap();
        let want = -3.0 * (0.7f64.powi(2) * 0.7f64.powi(2));
        assert!((penalty(&bad, 3.0) - want).abs() < 1e-15);
        assert!((penalty(&bad, 3.0) + 3.0 * 0.2401).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_central_differences() {
        let mut rng = stream(0x11ce, 5);
        for s in [spec(2, 2), spec(3, 3)] {
            // Incoherent by construction: independent entries per grid.
            let mut ts = random_coherent_structure(s, (-1.5, 1.5), &mut rng);
            for id in interior_entries(s) {
                ts.set_entry(id, ts.entry(id) + 0.3 * standard_uniform(&mut rng));
            }
            let lambda = 2.5;
            let grad = penalty_grad_entries(&ts, lambda);
            let h = 1e-6;
            for (idx, id) in interior_entries(s).into_iter().enumerate() {
                let v = ts.entry(id);
                let mut up = ts.clone();
                up.set_entry(id, v + h);
                let mut dn = ts.clone();
                dn.set_entry(id, v - h);
                let fd = (penalty(&up, lambda) - penalty(&dn, lambda)) / (2.0 * h);
                assert!(
                    (grad[idx] - fd).abs() < 1e-6 * grad[idx].abs().max(1.0),
                    "{id}: analytic {} vs fd {fd}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn constraints_vanish_exactly_on_coherent_structures() {
        let lattice =
            ThresholdStructure::lattice(spec(4, 3), &[-1.0, 0.0, 1.0], &[-0.5, 0.5]).unwrap();
        for ts in [lattice, design1_thresholds(), pinwheel()] {
            assert!(constraint_vector(&ts).iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn constraint_jacobian_matches_central_differences() {
        // Design-like 2x2 structure: the single constraint row in full
        // coordinates is (0, 0, -3.5, 3.5) over (a1[1][1], a1[1][2],
        // a2[1][1], a2[2][1]).
        let jac = constraint_jacobian(&design1_thresholds());
        assert_eq!(jac, vec![vec![0.0, 0.0, -3.5, 3.5]]);

        let mut rng = stream(0x11ce, 6);
        let s = spec(3, 3);
        let mut ts = random_coherent_structure(s, (-1.5, 1.5), &mut rng);
        for id in interior_entries(s) {
            ts.set_entry(id, ts.entry(id) + 0.4 * standard_uniform(&mut rng));
        }
        let jac = constraint_jacobian(&ts);
        let entries = interior_entries(s);
        let h = 1e-4;
        for (c, row) in jac.iter().enumerate() {
            for (e, &id) in entries.iter().enumerate() {
                let v = ts.entry(id);
                let mut up = ts.clone();
                up.set_entry(id, v + h);
                let mut dn = ts.clone();
                dn.set_entry(id, v - h);
                // Each constraint is bilinear, so the central difference is
                // exact up to rounding.
                let fd = (constraint_vector(&up)[c] - constraint_vector(&dn)[c]) / (2.0 * h);
                assert!(
                    (row[e] - fd).abs() < 1e-9,
                    "row {c}, entry {id}: {} vs {fd}",
                    row[e]
                );
            }
        }
    }

    /// Marginal of dimension 1 as a sum over dimension-2 strips at column j:
    /// an identity that holds on coherent structures and serves as an
    /// independent check of the cell decomposition.
    fn strip_marginal(ts: &ThresholdStructure, j: usize, v1: f64, v2: f64, rho: f64) -> f64 {
        let m2 = ts.spec().m2;
        (1..=m2)
            .map(|j2| {
                bvn_cdf(ts.a1(j, j2) - v1, ts.a2(j, j2) - v2, rho)
                    - bvn_cdf(ts.a1(j, j2) - v1, ts.a2(j, j2 - 1) - v2, rho)
            })
            .sum()
    }

    #[test]
    fn strip_identity_matches_cell_sums_and_is_monotone() {
        let mut rng = stream(0x11ce, 7);
        let mut structures = vec![pinwheel(), design1_thresholds()];
        for _ in 0..6 {
            structures.push(random_coherent_structure(spec(4, 3), (-2.0, 2.0), &mut rng));
        }
        for ts in &structures {
            let s = ts.spec();
            for &(v1, v2, rho) in &[(0.0, 0.0, 0.3), (-0.8, 0.4, -0.5), (1.2, -0.3, 0.7)] {
                let params = ModelParams::new(vec![v1], vec![v2], ts.clone(), rho).unwrap();
                let probs = cell_prob_matrix(&params, &[1.0], &[1.0]);
                for j in 1..=s.m1 {
                    let cells: f64 = probs[..j].iter().map(|r| r.iter().sum::<f64>()).sum();
                    let strips = strip_marginal(ts, j, v1, v2, rho);
                    assert!(
                        (cells - strips).abs() < 1e-11,
                        "marginal via cells {cells} vs strips {strips}"
                    );
                }
            }
            // The marginal is non-increasing in the dimension-1 index.
            for j in 1..=s.m1 {
                let mut last = f64::INFINITY;
                for step in 0..9 {
                    let v1 = -2.0 + 0.5 * step as f64;
                    let p = strip_marginal(ts, j, v1, 0.2, 0.4);
                    assert!(p <= last + 1e-12, "marginal rose from {last} to {p}");
                    last = p;
                }
            }
        }
    }

    #[test]
    fn layout_orders_slopes_thresholds_then_correlation() {
        let layout = CoordLayout::new(spec(2, 2), 2, 1);
        assert_eq!(layout.len(), 8);
        assert_eq!(layout.beta1(1), 1);
        assert_eq!(layout.beta2(0), 2);
        assert_eq!(layout.threshold(0), 3);
        assert_eq!(layout.rho(), 7);
        assert_eq!(
            layout.names(),
            vec![
                "beta1[0]",
                "beta1[1]",
                "beta2[0]",
                "a1[1][1]",
                "a1[1][2]",
                "a2[1][1]",
                "a2[2][1]",
                "rho"
            ]
        );
        let id = EntryId { dim: 2, j1: 2, j2: 1 };
        assert_eq!(layout.entry_offset(id), 6);
    }

    #[test]
    fn dataset_validation_catches_bad_input() {
        assert!(matches!(
            Dataset::new(vec![0], vec![1], vec![1.0], 1, vec![1.0], 1),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Dataset::new(vec![1, 2], vec![1], vec![], 0, vec![], 0),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            Dataset::new(vec![1], vec![1], vec![f64::NAN], 1, vec![], 0),
            Err(Error::Data(_))
        ));

        let data = no_covariate_data(vec![1, 2, 3], vec![1, 2, 2]);
        assert!(data.validate_categories(spec(3, 2)).is_ok());
        assert!(matches!(
            data.validate_categories(spec(2, 2)),
            Err(Error::ResponseOutOfRange { dim: 1, value: 3, .. })
        ));
        assert!(matches!(
            data.validate_categories(spec(4, 2)),
            Err(Error::MissingCategory { dim: 1, category: 4 })
        ));
        let gap = no_covariate_data(vec![1, 3], vec![1, 1]);
        assert!(matches!(
            gap.validate_categories(spec(3, 1)),
            Err(Error::MissingCategory { dim: 1, category: 2 })
        ));
    }
}
