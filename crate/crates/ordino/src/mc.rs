//! Monte Carlo replication driver: simulate a built-in design, fit both
//! model families on each replication, and tabulate across-replication
//! moments per coordinate.
//!
//! Each replication runs from its own derived seed (one stream for the
//! sample, one per fit), so the study is reproducible from the master seed
//! alone and the result is identical no matter how replications are
//! scheduled across workers. Replications whose fit errors out or stops
//! short of the gradient tolerance are excluded from the moments and
//! counted as failures for that family only.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dgp::{design, simulate, DesignConfig};
use crate::estimate::{fit_lattice, fit_nonlattice, FitConfig, FitResult};
use crate::likelihood::{CoordLayout, ModelParams};
use crate::seed::sub_seed;
use crate::{Error, Result};

/// Fitting controls shared by every replication; per-fit seeds are derived
/// from the study's master seed.
#[derive(Clone, Debug)]
pub struct McConfig {
    pub multistart: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub tie_tol: f64,
    pub lambda: Option<f64>,
}

impl Default for McConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        Self {
            multistart: 16,
            max_iter: fit.max_iter,
            grad_tol: fit.grad_tol,
            tie_tol: fit.tie_tol,
            lambda: fit.lambda,
        }
    }
}

impl McConfig {
    fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            multistart: self.multistart,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            tie_tol: self.tie_tol,
            lambda: self.lambda,
            seed,
        }
    }
}

/// Across-replication moments for one fitted family, indexed like
/// [`McSummary::names`]. Empty vectors when every replication failed.
#[derive(Clone, Debug, serde::Serialize)]
pub struct FamilySummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub used: usize,
    pub failures: usize,
}

/// Study result: coordinate names and truth on the full threshold grid,
/// plus per-family moments and failure counts.
#[derive(Clone, Debug, serde::Serialize)]
pub struct McSummary {
    pub design: u8,
    pub reps: usize,
    pub n: usize,
    pub seed: u64,
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub nonlattice: FamilySummary,
    pub lattice: FamilySummary,
    /// True when some family has at most one usable replication, so its
    /// standard deviations are reported as zero by convention.
    pub sd_degenerate: bool,
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Expands fitted parameters (whose snapped threshold ties vary by
/// replication) onto the fixed full-grid coordinate order, so moments
/// aggregate entry by entry.
fn full_coords(layout: &CoordLayout, params: &ModelParams) -> Vec<f64> {
    let mut v = Vec::with_capacity(layout.len());
    v.extend_from_slice(&params.beta1);
    v.extend_from_slice(&params.beta2);
    for &id in layout.entries() {
        v.push(params.thresholds.entry(id));
    }
    v.push(params.rho);
    v
}

struct RepOutcome {
    nonlattice: Option<Vec<f64>>,
    lattice: Option<Vec<f64>>,
}

fn usable(layout: &CoordLayout, fit: Result<FitResult>) -> Option<Vec<f64>> {
    match fit {
        Ok(r) if r.converged => Some(full_coords(layout, &r.params)),
        _ => None,
    }
}

fn run_rep(
    config: &DesignConfig,
    layout: &CoordLayout,
    n: usize,
    rep_seed: u64,
    mc: &McConfig,
) -> Result<RepOutcome> {
    let data = simulate(config, n, sub_seed(rep_seed, 0))?;
    let spec = config.params.thresholds.spec();
    let nl = fit_nonlattice(&data, spec, &mc.fit_config(sub_seed(rep_seed, 1)));
    let lat = fit_lattice(&data, spec, &mc.fit_config(sub_seed(rep_seed, 2)));
    Ok(RepOutcome {
        nonlattice: usable(layout, nl),
        lattice: usable(layout, lat),
    })
}

fn family_summary<'a, I>(len: usize, reps: usize, coords: I) -> FamilySummary
where
    I: Iterator<Item = Option<&'a [f64]>>,
{
    let used: Vec<&[f64]> = coords.flatten().collect();
    if used.is_empty() {
        return FamilySummary {
            mean: Vec::new(),
            sd: Vec::new(),
            used: 0,
            failures: reps,
        };
    }
    let count = used.len();
    let mut mean = vec![0.0; len];
    for v in &used {
        for (m, x) in mean.iter_mut().zip(*v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut sd = vec![0.0; len];
    if count > 1 {
        for v in &used {
            for (s, (x, m)) in sd.iter_mut().zip(v.iter().zip(&mean)) {
                *s += (x - m) * (x - m);
            }
        }
        for s in &mut sd {
            *s = (*s / (count - 1) as f64).sqrt();
        }
    }
    FamilySummary {
        mean,
        sd,
        used: count,
        failures: reps - count,
    }
}

pub fn run_mc_study(
    design_id: u8,
    reps: usize,
    n: usize,
    seed: u64,
    config: &McConfig,
) -> Result<McSummary> {
    if reps == 0 {
        return Err(Error::InvalidParameter("reps must be at least 1".into()));
    }
    if config.multistart == 0 {
        return Err(Error::InvalidParameter(
            "multistart must be at least 1".into(),
        ));
    }
    let started = Instant::now();
    let dcfg = design(design_id)?;
    let spec = dcfg.params.thresholds.spec();
    let layout = CoordLayout::new(spec, dcfg.k1(), dcfg.k2());

    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|r| run_rep(&dcfg, &layout, n, sub_seed(seed, r as u64), config))
        .collect::<Result<_>>()?;

    let nonlattice = family_summary(
        layout.len(),
        reps,
        outcomes.iter().map(|o| o.nonlattice.as_deref()),
    );
    let lattice = family_summary(
        layout.len(),
        reps,
        outcomes.iter().map(|o| o.lattice.as_deref()),
    );
    let sd_degenerate = nonlattice.used <= 1 || lattice.used <= 1;
    Ok(McSummary {
        design: design_id,
        reps,
        n,
        seed,
        names: layout.names(),
        truth: full_coords(&layout, &dcfg.params),
        nonlattice,
        lattice,
        sd_degenerate,
        wall_clock: started.elapsed(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

/// Formats `x` with four significant digits, switching to scientific
/// notation outside [1e-3, 1e4).
pub fn format_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.000".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-3..4).contains(&mag) {
        format!("{x:.3e}")
    } else {
        format!("{x:.*}", (3 - mag).max(0) as usize)
    }
}

/// Renders the summary as a parameter/truth/nonlattice/lattice table.
/// Markdown displays "mean (sd)" at four significant digits; CSV carries
/// full precision in separate mean and sd columns. A family with no usable
/// replications renders as empty cells.
pub fn render_table(summary: &McSummary, format: TableFormat) -> String {
    let family_cells = |family: &FamilySummary, i: usize| -> (String, String) {
        if family.mean.is_empty() {
            (String::new(), String::new())
        } else {
            (family.mean[i].to_string(), family.sd[i].to_string())
        }
    };
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            out.push_str("| Parameter | Truth | Nonlattice | Lattice |\n");
            out.push_str("|---|---|---|---|\n");
            for (i, name) in summary.names.iter().enumerate() {
                let cell = |family: &FamilySummary| {
                    if family.mean.is_empty() {
                        "-".to_string()
                    } else {
                        format!(
                            "{} ({})",
                            format_sig(family.mean[i]),
                            format_sig(family.sd[i])
                        )
                    }
                };
                out.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    name,
                    format_sig(summary.truth[i]),
                    cell(&summary.nonlattice),
                    cell(&summary.lattice),
                ));
            }
        }
        TableFormat::Csv => {
            out.push_str("parameter,truth,nonlattice_mean,nonlattice_sd,lattice_mean,lattice_sd\n");
            for (i, name) in summary.names.iter().enumerate() {
                let (nm, ns) = family_cells(&summary.nonlattice, i);
                let (lm, ls) = family_cells(&summary.lattice, i);
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    name, summary.truth[i], nm, ns, lm, ls
                ));
            }
        }
    }
    out
}
