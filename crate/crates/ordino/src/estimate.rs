//! Penalized maximum likelihood with multistart quasi-Newton ascent.
//!
//! The free parameter vector is [beta1, beta2, threshold coordinates, t]
//! where rho = tanh(t) and each threshold coordinate stands for a class of
//! interior entries sharing one value. A full fit gives every entry its own
//! coordinate and adds the coherency penalty (weight lambda, default N) to
//! the mean log-likelihood; a lattice fit ties each level across the other
//! dimension's categories, which makes the structure coherent by
//! construction.
//!
//! Each start draws slopes from N(0, 1), threshold baselines from empirical
//! index quantiles at the marginal response frequencies (jittered, then
//! sorted within each level line), and a correlation uniform on
//! (-0.8, 0.8). The winner is the highest penalized objective, ties going
//! to the lowest start index, so results do not depend on scheduling.
//!
//! Estimated entry values agreeing within `tie_tol` along shared boundary
//! segments are snapped to their class mean and the model is refit once
//! with those coordinates shared. Standard errors come from a constrained
//! sandwich: with J the outer-product information of per-observation scores
//! (reported in rho, not t) and R the jacobian of the corner constraints in
//! reduced coordinates (rows that vanish under sharing are dropped),
//! B = J^-1 - J^-1 R'(R J^-1 R')^-1 R J^-1 and the stored covariance is
//! B J B' / N, reducing to J^-1 / N exactly when no constraint row
//! survives.

use nalgebra::{DMatrix, DVector};
use rand_core::RngCore;

use crate::gauss::standard_normal;
use crate::likelihood::{
    constraint_jacobian, for_each_obs_score, loglik, loglik_and_score, penalty,
    penalty_grad_entries, CoordLayout, Dataset, ModelParams,
};
use crate::model::{interior_entries, EntryId, ResponseSpec, ThresholdStructure};
use crate::optim::{maximize, OptimResult};
use crate::seed::{standard_uniform, stream};
use crate::{Error, Result};

/// Start jitter applied around the quantile baselines.
const JITTER_SD: f64 = 0.25;
/// Correlation starts are uniform on (-RHO_START, RHO_START).
const RHO_START: f64 = 0.8;
/// Minimum gap enforced between sorted start thresholds.
const START_SPREAD: f64 = 1e-6;
/// |t| bound keeping tanh(t) numerically inside (-1, 1).
const T_BOUND: f64 = 12.0;
/// Constraint rows with smaller norm are dropped as structurally zero.
const ROW_DROP_TOL: f64 = 1e-8;
/// Reciprocal condition number below which the information is treated as
/// rank deficient. Weakly identified directions (tiny but genuine singular
/// values well above the SVD noise floor) stay invertible and surface as
/// large standard errors instead of an error.
const COND_TOL: f64 = 1e-14;

/// Fitting controls. `lambda` of None means the penalty weight equals the
/// sample size.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub multistart: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub tie_tol: f64,
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            multistart: 64,
            max_iter: 600,
            grad_tol: 1e-8,
            tie_tol: 1e-3,
            lambda: None,
            seed: 0,
        }
    }
}

/// Maps interior threshold entries to shared free coordinates.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamLayout {
    spec: ResponseSpec,
    k1: usize,
    k2: usize,
    /// Coordinate index per interior entry, in canonical entry order.
    entry_coord: Vec<usize>,
    n_coords: usize,
}

impl ParamLayout {
    /// Every interior entry is its own coordinate.
    pub fn full(spec: ResponseSpec, k1: usize, k2: usize) -> Self {
        let n = interior_entries(spec).len();
        Self {
            spec,
            k1,
            k2,
            entry_coord: (0..n).collect(),
            n_coords: n,
        }
    }

    /// One coordinate per level of each grid: A1 level j1 is constant in
    /// j2 and vice versa.
    pub fn lattice(spec: ResponseSpec, k1: usize, k2: usize) -> Self {
        let entries = interior_entries(spec);
        let entry_coord = entries
            .iter()
            .map(|id| {
                if id.dim == 1 {
                    id.j1 - 1
                } else {
                    (spec.m1 - 1) + (id.j2 - 1)
                }
            })
            .collect();
        Self {
            spec,
            k1,
            k2,
            entry_coord,
            n_coords: (spec.m1 - 1) + (spec.m2 - 1),
        }
    }

    /// One coordinate per tie class; `classes` must partition the interior
    /// entries and be sorted by smallest member, as
    /// [`ThresholdStructure::tie_groups`] returns them.
    pub fn from_classes(spec: ResponseSpec, k1: usize, k2: usize, classes: &[Vec<EntryId>]) -> Self {
        let entries = interior_entries(spec);
        let mut entry_coord = vec![usize::MAX; entries.len()];
        for (c, class) in classes.iter().enumerate() {
            for id in class {
                let e = entries.binary_search(id).expect("interior entry");
                entry_coord[e] = c;
            }
        }
        assert!(
            entry_coord.iter().all(|&c| c != usize::MAX),
            "classes must cover every interior entry"
        );
        Self {
            spec,
            k1,
            k2,
            entry_coord,
            n_coords: classes.len(),
        }
    }

    pub fn spec(&self) -> ResponseSpec {
        self.spec
    }

    pub fn n_coords(&self) -> usize {
        self.n_coords
    }

    pub fn n_free(&self) -> usize {
        self.k1 + self.k2 + self.n_coords + 1
    }

    fn t_index(&self) -> usize {
        self.n_free() - 1
    }

    fn coord_index(&self, c: usize) -> usize {
        self.k1 + self.k2 + c
    }

    /// Entries grouped by coordinate, each class in canonical entry order.
    pub fn classes(&self) -> Vec<Vec<EntryId>> {
        let entries = interior_entries(self.spec);
        let mut out = vec![Vec::new(); self.n_coords];
        for (e, &c) in self.entry_coord.iter().enumerate() {
            out[c].push(entries[e]);
        }
        out
    }

    /// Reported coordinate names; tied entries are joined with '='.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_free());
        for c in 0..self.k1 {
            out.push(format!("beta1[{c}]"));
        }
        for c in 0..self.k2 {
            out.push(format!("beta2[{c}]"));
        }
        for class in self.classes() {
            out.push(
                class
                    .iter()
                    .map(|id| id.to_string())
                    .collect::<Vec<_>>()
                    .join("="),
            );
        }
        out.push("rho".into());
        out
    }

    /// Free vector at the given parameters; tied entries contribute the
    /// value of their first class member.
    pub fn pack(&self, params: &ModelParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_free());
        v.extend_from_slice(&params.beta1);
        v.extend_from_slice(&params.beta2);
        for class in self.classes() {
            v.push(params.thresholds.entry(class[0]));
        }
        v.push(params.rho.atanh());
        v
    }

    fn grids(&self, v: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (m1, m2) = (self.spec.m1, self.spec.m2);
        let mut a1 = vec![vec![f64::NEG_INFINITY; m2]; m1 + 1];
        a1[m1] = vec![f64::INFINITY; m2];
        let mut a2 = vec![vec![0.0; m2 + 1]; m1];
        for row in a2.iter_mut() {
            row[0] = f64::NEG_INFINITY;
            row[m2] = f64::INFINITY;
        }
        for (e, id) in interior_entries(self.spec).into_iter().enumerate() {
            let val = v[self.coord_index(self.entry_coord[e])];
            if id.dim == 1 {
                a1[id.j1][id.j2 - 1] = val;
            } else {
                a2[id.j1 - 1][id.j2] = val;
            }
        }
        (a1, a2)
    }

    /// Strict monotonicity of both grids along their own level index, plus
    /// finite slopes and a correlation bounded away from +/-1.
    pub fn feasible(&self, v: &[f64]) -> bool {
        if v.iter().any(|x| !x.is_finite()) || v[self.t_index()].abs() >= T_BOUND {
            return false;
        }
        let (a1, a2) = self.grids(v);
        let (m1, m2) = (self.spec.m1, self.spec.m2);
        for j2 in 0..m2 {
            for j1 in 0..m1 {
                if !(a1[j1][j2] < a1[j1 + 1][j2]) {
                    return false;
                }
            }
        }
        for j1 in 0..m1 {
            for j2 in 0..m2 {
                if !(a2[j1][j2] < a2[j1][j2 + 1]) {
                    return false;
                }
            }
        }
        true
    }

    /// Model parameters at a feasible free vector.
    pub fn unpack(&self, v: &[f64]) -> ModelParams {
        let (a1, a2) = self.grids(v);
        let thresholds = ThresholdStructure::from_grids(self.spec, a1, a2)
            .expect("feasible free vector yields a valid structure");
        ModelParams {
            beta1: v[..self.k1].to_vec(),
            beta2: v[self.k1..self.k1 + self.k2].to_vec(),
            thresholds,
            rho: v[self.t_index()].tanh(),
        }
    }

    /// Contracts a full-coordinate gradient into the reduced space. The
    /// last coordinate stays in rho unless `t_of_rho` supplies the current
    /// correlation for the tanh chain rule.
    fn contract(&self, full: &[f64], t_of_rho: Option<f64>) -> Vec<f64> {
        let kk = self.k1 + self.k2;
        let mut out = vec![0.0; self.n_free()];
        out[..kk].copy_from_slice(&full[..kk]);
        for (e, &c) in self.entry_coord.iter().enumerate() {
            out[self.coord_index(c)] += full[kk + e];
        }
        let g_rho = full[full.len() - 1];
        out[self.t_index()] = match t_of_rho {
            Some(rho) => g_rho * (1.0 - rho * rho),
            None => g_rho,
        };
        out
    }
}

/// Penalized mean log-likelihood at a feasible free vector.
fn objective(data: &Dataset, layout: &ParamLayout, lambda: f64, v: &[f64]) -> f64 {
    let params = layout.unpack(v);
    loglik(&params, data) + penalty(&params.thresholds, lambda)
}

/// Penalized objective and its reduced-space gradient.
fn objective_grad(data: &Dataset, layout: &ParamLayout, lambda: f64, v: &[f64]) -> (f64, Vec<f64>) {
    let params = layout.unpack(v);
    let (ll, full_grad) = loglik_and_score(&params, data);
    let mut grad = layout.contract(&full_grad, Some(params.rho));
    let pen_grad = penalty_grad_entries(&params.thresholds, lambda);
    let kk = layout.k1 + layout.k2;
    for (e, &c) in layout.entry_coord.iter().enumerate() {
        grad[layout.coord_index(c)] += pen_grad[e];
    }
    let _ = kk;
    (ll + penalty(&params.thresholds, lambda), grad)
}

/// One multistart draw: slopes from N(0, 1), correlation uniform on
/// (-0.8, 0.8), thresholds at empirical index quantiles of the marginal
/// response frequencies plus N(0, 0.25^2) jitter, sorted along each level
/// line and spread to strictness.
pub(crate) fn multistart_draw<R: RngCore>(
    data: &Dataset,
    layout: &ParamLayout,
    rng: &mut R,
) -> Vec<f64> {
    let mut v = vec![0.0; layout.n_free()];
    for c in 0..layout.k1 + layout.k2 {
        v[c] = standard_normal(rng);
    }
    let rho = RHO_START * (2.0 * standard_uniform(rng) - 1.0);
    v[layout.t_index()] = rho.atanh();

    let cuts1 = quantile_cuts(data, layout, 1, &v);
    let cuts2 = quantile_cuts(data, layout, 2, &v);
    for (c, class) in layout.classes().into_iter().enumerate() {
        let id = class[0];
        let base = if id.dim == 1 {
            cuts1[id.j1 - 1]
        } else {
            cuts2[id.j2 - 1]
        };
        v[layout.coord_index(c)] = base + JITTER_SD * standard_normal(rng);
    }
    monotonize(layout, &mut v);
    v
}

/// Empirical quantiles of the index x'beta at the cumulative marginal
/// frequencies of the responses: one cut per interior level.
fn quantile_cuts(data: &Dataset, layout: &ParamLayout, dim: usize, v: &[f64]) -> Vec<f64> {
    let n = data.n();
    let m = if dim == 1 {
        layout.spec.m1
    } else {
        layout.spec.m2
    };
    let mut index: Vec<f64> = (0..n)
        .map(|i| {
            if dim == 1 {
                data.x1_row(i)
                    .iter()
                    .zip(&v[..layout.k1])
                    .map(|(x, b)| x * b)
                    .sum()
            } else {
                data.x2_row(i)
                    .iter()
                    .zip(&v[layout.k1..layout.k1 + layout.k2])
                    .map(|(x, b)| x * b)
                    .sum()
            }
        })
        .collect();
    index.sort_by(f64::total_cmp);
    let y = if dim == 1 { data.y1() } else { data.y2() };
    let mut counts = vec![0usize; m];
    for &yi in y {
        counts[yi as usize - 1] += 1;
    }
    let mut cuts = Vec::with_capacity(m - 1);
    let mut below = 0usize;
    for level in 0..m - 1 {
        below += counts[level];
        let phat = below as f64 / n as f64;
        cuts.push(index[((phat * (n - 1) as f64) as usize).min(n - 1)]);
    }
    cuts
}

/// Sorts the interior values along each level line and spreads exact ties,
/// then writes the values back through the coordinate map.
fn monotonize(layout: &ParamLayout, v: &mut [f64]) {
    let (mut a1, mut a2) = layout.grids(v);
    let (m1, m2) = (layout.spec.m1, layout.spec.m2);
    for j2 in 0..m2 {
        let mut col: Vec<f64> = (1..m1).map(|j1| a1[j1][j2]).collect();
        col.sort_by(f64::total_cmp);
        for w in 0..col.len() {
            if w > 0 && col[w] <= col[w - 1] {
                col[w] = col[w - 1] + START_SPREAD;
            }
            a1[w + 1][j2] = col[w];
        }
    }
    for j1 in 0..m1 {
        let mut row: Vec<f64> = (1..m2).map(|j2| a2[j1][j2]).collect();
        row.sort_by(f64::total_cmp);
        for w in 0..row.len() {
            if w > 0 && row[w] <= row[w - 1] {
                row[w] = row[w - 1] + START_SPREAD;
            }
            a2[j1][w + 1] = row[w];
        }
    }
    for (e, id) in interior_entries(layout.spec).into_iter().enumerate() {
        let val = if id.dim == 1 {
            a1[id.j1][id.j2 - 1]
        } else {
            a2[id.j1 - 1][id.j2]
        };
        v[layout.coord_index(layout.entry_coord[e])] = val;
    }
}

/// Estimation output: parameters, reduced-space estimates with the
/// correlation reported directly, and the constrained sandwich covariance
/// of the estimates (stored as V / N, standard errors on its diagonal).
#[derive(Clone, Debug, serde::Serialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub layout: ParamLayout,
    pub estimates: Vec<f64>,
    pub names: Vec<String>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub loglik: f64,
    pub objective: f64,
    pub converged: bool,
    pub start_index: usize,
    pub failed_starts: usize,
    /// Accepted objective values of the final optimization run.
    pub trace: Vec<f64>,
}

impl FitResult {
    /// Estimate looked up by reported coordinate name.
    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.estimates[i])
    }
}

#[derive(Clone, Copy, PartialEq)]
enum LayoutKind {
    Full,
    Lattice,
}

/// Fits the model with every interior threshold entry free, the coherency
/// penalty active, and tie snapping after the multistart winner is found.
pub fn fit_nonlattice(data: &Dataset, spec: ResponseSpec, cfg: &FitConfig) -> Result<FitResult> {
    fit_impl(data, spec, cfg, LayoutKind::Full)
}

/// Fits the model with thresholds constant across the other dimension, one
/// coordinate per level.
pub fn fit_lattice(data: &Dataset, spec: ResponseSpec, cfg: &FitConfig) -> Result<FitResult> {
    fit_impl(data, spec, cfg, LayoutKind::Lattice)
}

fn fit_impl(
    data: &Dataset,
    spec: ResponseSpec,
    cfg: &FitConfig,
    kind: LayoutKind,
) -> Result<FitResult> {
    data.validate_categories(spec)?;
    let mut layout = match kind {
        LayoutKind::Full => ParamLayout::full(spec, data.k1(), data.k2()),
        LayoutKind::Lattice => ParamLayout::lattice(spec, data.k1(), data.k2()),
    };
    if data.n() <= layout.n_free() {
        return Err(Error::TooFewObservations {
            n: data.n(),
            k: layout.n_free(),
        });
    }
    let lambda = cfg.lambda.unwrap_or(data.n() as f64);

    let mut best: Option<(usize, OptimResult)> = None;
    let mut failed_starts = 0;
    for s in 0..cfg.multistart.max(1) {
        let mut rng = stream(cfg.seed, s as u64);
        let x0 = multistart_draw(data, &layout, &mut rng);
        let run = run_ascent(data, &layout, lambda, &x0, cfg);
        if !run.converged {
            failed_starts += 1;
        }
        if !run.value.is_finite() {
            continue;
        }
        let better = best.as_ref().is_none_or(|(_, b)| run.value > b.value);
        if better {
            best = Some((s, run));
        }
    }
    let (start_index, mut run) = best.ok_or_else(|| {
        Error::Optimization("no start produced a finite objective".into())
    })?;

    if kind == LayoutKind::Full {
        let params = layout.unpack(&run.x);
        let classes = params.thresholds.tie_groups(cfg.tie_tol);
        if classes.len() < layout.n_coords() {
            let snapped = ParamLayout::from_classes(spec, data.k1(), data.k2(), &classes);
            let mut x0 = Vec::with_capacity(snapped.n_free());
            x0.extend_from_slice(&run.x[..data.k1() + data.k2()]);
            for class in &classes {
                let mean = class
                    .iter()
                    .map(|&id| params.thresholds.entry(id))
                    .sum::<f64>()
                    / class.len() as f64;
                x0.push(mean);
            }
            x0.push(run.x[layout.t_index()]);
            // Snapping can break strict monotonicity in degenerate corner
            // cases; keep the unsnapped fit then.
            if snapped.feasible(&x0) {
                let refit = run_ascent(data, &snapped, lambda, &x0, cfg);
                if refit.value.is_finite() {
                    layout = snapped;
                    run = refit;
                }
            }
        }
    }

    let params = layout.unpack(&run.x);
    let (covariance, std_errors) = constrained_covariance(data, &params, &layout)?;
    let mut estimates = run.x.clone();
    let ti = layout.t_index();
    estimates[ti] = params.rho;
    Ok(FitResult {
        loglik: loglik(&params, data),
        objective: run.value,
        names: layout.names(),
        estimates,
        std_errors,
        covariance,
        converged: run.converged,
        start_index,
        failed_starts,
        trace: run.trace,
        params,
        layout,
    })
}

fn run_ascent(
    data: &Dataset,
    layout: &ParamLayout,
    lambda: f64,
    x0: &[f64],
    cfg: &FitConfig,
) -> OptimResult {
    maximize(
        x0,
        |v| objective(data, layout, lambda, v),
        |v| objective_grad(data, layout, lambda, v),
        |v| layout.feasible(v),
        cfg.max_iter,
        cfg.grad_tol,
    )
}

/// Constrained sandwich covariance of the reduced estimates at `params`,
/// with the correlation in rho space. Returns the stored covariance V / N
/// and the standard errors on its diagonal.
pub(crate) fn constrained_covariance(
    data: &Dataset,
    params: &ModelParams,
    layout: &ParamLayout,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let nf = layout.n_free();
    let full = CoordLayout::new(layout.spec, layout.k1, layout.k2);
    let mut info = DMatrix::<f64>::zeros(nf, nf);
    for_each_obs_score(params, data, &full, |_, g| {
        let s = DVector::from_vec(layout.contract(g, None));
        info.ger(1.0, &s, &s, 1.0);
    });
    info /= data.n() as f64;

    let kk = layout.k1 + layout.k2;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for full_row in constraint_jacobian(&params.thresholds) {
        let mut row = DVector::zeros(nf);
        for (e, &c) in layout.entry_coord.iter().enumerate() {
            row[kk + c] += full_row[e];
        }
        if row.norm() > ROW_DROP_TOL {
            rows.push(row);
        }
    }

    let v = constrained_variance(&info, &rows)?;
    let cov: Vec<Vec<f64>> = (0..nf)
        .map(|i| (0..nf).map(|j| v[(i, j)] / data.n() as f64).collect())
        .collect();
    let se = (0..nf)
        .map(|i| (v[(i, i)] / data.n() as f64).max(0.0).sqrt())
        .collect();
    Ok((cov, se))
}

/// V = B J B' with B = J^-1 - J^-1 R'(R J^-1 R')^-1 R J^-1; exactly J^-1
/// when no constraint rows are present.
fn constrained_variance(info: &DMatrix<f64>, rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let inv = checked_inverse(info)?;
    if rows.is_empty() {
        return Ok(inv);
    }
    let r = DMatrix::from_rows(
        &rows
            .iter()
            .map(|row| row.transpose())
            .collect::<Vec<_>>(),
    );
    let rjr = &r * &inv * r.transpose();
    let rjr_inv = checked_inverse(&rjr)?;
    let b = &inv - &inv * r.transpose() * rjr_inv * &r * &inv;
    Ok(&b * info * &b)
}

fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * COND_TOL) {
        return Err(Error::SingularInformation { cond: smax / smin });
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::SingularInformation { cond: smax / smin })
}
