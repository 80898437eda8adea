//! Command line for the bivariate ordered response toolkit: simulate the
//! built-in designs, fit either model family, run Monte Carlo studies,
//! validate threshold structures, print probability grids, and fit the
//! rank-correlation estimator.
//!
//! Exit codes: 0 success, 1 user error (arguments, files, shapes), 2
//! numerical failure (incoherent structure, singular information,
//! degenerate kernel). `--json` switches stdout to a machine-readable
//! document with the same numeric content as the human output.
//! `ORDINO_THREADS` caps the worker pool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ordino::dgp::{design, simulate, DesignConfig};
use ordino::estimate::{fit_lattice, fit_nonlattice, FitConfig, FitResult};
use ordino::io::{
    load_params, read_dataset_csv, save_json, write_dataset_csv, SpecFile,
};
use ordino::likelihood::cell_prob_matrix;
use ordino::mc::{format_sig, render_table, run_mc_study, McConfig, McSummary, TableFormat};
use ordino::mrc::{fit_mrc, MrcConfig};
use ordino::{Error, Result};

/// Interior-corner tolerance used by `validate` and hierarchy detection.
const VALIDATE_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "ordino", version, about = "Bivariate ordered response models")]
struct Cli {
    /// Machine-readable JSON on stdout instead of the human rendering.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelFamily {
    Nonlattice,
    Lattice,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a built-in design and write it as CSV.
    Simulate {
        /// Design number (1, 2 or 3).
        #[arg(long)]
        design: u8,
        /// Observations to draw.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the matching model spec (JSON) here.
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Fit one model family to a CSV dataset by penalized maximum likelihood.
    Estimate {
        /// Input CSV dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: ModelFamily,
        /// Model spec JSON (grid sizes and covariate columns).
        #[arg(long)]
        spec: PathBuf,
        /// Write the full estimation result (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        multistart: usize,
        /// Coherency penalty weight; defaults to the sample size.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo study: simulate and fit both families per replication.
    Mc {
        #[arg(long)]
        design: u8,
        #[arg(long)]
        reps: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the summary (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        multistart: usize,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Check a spec file's threshold structure: coherency and hierarchy.
    Validate {
        #[arg(long)]
        spec: PathBuf,
        /// Render the decision tree when the structure is hierarchical.
        #[arg(long)]
        tree: bool,
    },
    /// Print the cell probability grid at one covariate point.
    Probtable {
        #[arg(long)]
        spec: PathBuf,
        /// Fitted parameters (bare JSON or an estimation result).
        #[arg(long)]
        params: PathBuf,
        /// Equation-1 covariate values, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x1: Vec<f64>,
        /// Equation-2 covariate values, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x2: Vec<f64>,
    },
    /// Rank-correlation fit of one equation's exclusive-covariate slopes.
    Mrc {
        #[arg(long)]
        data: PathBuf,
        /// Response dimension (1 or 2).
        #[arg(long)]
        dim: usize,
        /// Exclusive column indices within that equation's covariate block
        /// (0-based, comma separated); the first carries the unit
        /// coefficient.
        #[arg(long, value_delimiter = ',', required = true)]
        exclusive: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let informational = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if informational {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Incoherent { .. }
                | Error::SingularInformation { .. }
                | Error::Optimization(_)
                | Error::DegenerateKernel { .. }
                | Error::ZeroVariance { .. } => 2,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match thread_cap()? {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("ORDINO_THREADS") {
        Ok(raw) => match raw.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Some(k)),
            _ => Err(Error::InvalidParameter(format!(
                "ORDINO_THREADS must be a positive integer, found {raw:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            design: id,
            n,
            seed,
            out,
            spec_out,
        } => cmd_simulate(cli.json, id, n, seed, &out, spec_out.as_deref()),
        Command::Estimate {
            data,
            model,
            spec,
            out,
            multistart,
            lambda,
            seed,
        } => cmd_estimate(
            cli.json,
            &data,
            model,
            &spec,
            out.as_deref(),
            multistart,
            lambda,
            seed,
        ),
        Command::Mc {
            design: id,
            reps,
            n,
            seed,
            out,
            multistart,
            lambda,
        } => cmd_mc(cli.json, id, reps, n, seed, out.as_deref(), multistart, lambda),
        Command::Validate { spec, tree } => cmd_validate(cli.json, &spec, tree),
        Command::Probtable {
            spec,
            params,
            x1,
            x2,
        } => cmd_probtable(cli.json, &spec, &params, &x1, &x2),
        Command::Mrc {
            data,
            dim,
            exclusive,
        } => cmd_mrc(cli.json, &data, dim, exclusive),
    }
}

fn spec_from_design(config: &DesignConfig) -> SpecFile {
    let spec = config.params.thresholds.spec();
    SpecFile {
        version: "v1".into(),
        m: [spec.m1, spec.m2],
        x1: config
            .columns
            .iter()
            .filter(|c| c.in_eq1)
            .map(|c| c.name.clone())
            .collect(),
        x2: config
            .columns
            .iter()
            .filter(|c| c.in_eq2)
            .map(|c| c.name.clone())
            .collect(),
        thresholds: Some(config.params.thresholds.clone()),
    }
}

fn cmd_simulate(
    json: bool,
    id: u8,
    n: usize,
    seed: u64,
    out: &Path,
    spec_out: Option<&Path>,
) -> Result<()> {
    let config = design(id)?;
    let data = simulate(&config, n, seed)?;
    write_dataset_csv(out, &data)?;
    if let Some(path) = spec_out {
        spec_from_design(&config).save(path)?;
    }
    if json {
        print_json(&serde_json::json!({
            "design": id,
            "n": n,
            "seed": seed,
            "k1": data.k1(),
            "k2": data.k2(),
            "out": out.display().to_string(),
        }))
    } else {
        println!(
            "design {id}: wrote {n} rows ({} + {} covariate columns) to {}",
            data.k1(),
            data.k2(),
            out.display()
        );
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    json: bool,
    data_path: &Path,
    model: ModelFamily,
    spec_path: &Path,
    out: Option<&Path>,
    multistart: usize,
    lambda: Option<f64>,
    seed: u64,
) -> Result<()> {
    let data = read_dataset_csv(data_path)?;
    let spec_file = SpecFile::load(spec_path)?;
    spec_file.check_dataset(&data)?;
    let spec = spec_file.response_spec()?;
    let cfg = FitConfig {
        multistart,
        lambda,
        seed,
        ..FitConfig::default()
    };
    let fit = match model {
        ModelFamily::Nonlattice => fit_nonlattice(&data, spec, &cfg)?,
        ModelFamily::Lattice => fit_lattice(&data, spec, &cfg)?,
    };
    if let Some(path) = out {
        save_json(path, &fit)?;
    }
    if json {
        print_json(&fit)
    } else {
        print_fit(model, data.n(), &fit);
        Ok(())
    }
}

fn print_fit(model: ModelFamily, n: usize, fit: &FitResult) {
    let family = match model {
        ModelFamily::Nonlattice => "nonlattice",
        ModelFamily::Lattice => "lattice",
    };
    println!(
        "model: {family}  n: {n}  loglik: {}  converged: {}  failed starts: {}",
        format_sig(fit.loglik),
        fit.converged,
        fit.failed_starts
    );
    println!("{:<12} {:>10} {:>10}", "parameter", "estimate", "std.error");
    for (i, name) in fit.names.iter().enumerate() {
        println!(
            "{:<12} {:>10} {:>10}",
            name,
            format_sig(fit.estimates[i]),
            format_sig(fit.std_errors[i])
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_mc(
    json: bool,
    id: u8,
    reps: usize,
    n: usize,
    seed: u64,
    out: Option<&Path>,
    multistart: usize,
    lambda: Option<f64>,
) -> Result<()> {
    let config = McConfig {
        multistart,
        lambda,
        ..McConfig::default()
    };
    let summary = run_mc_study(id, reps, n, seed, &config)?;
    if let Some(path) = out {
        save_json(path, &summary)?;
    }
    eprintln!(
        "wall clock: {:.1}s",
        summary.wall_clock.as_secs_f64()
    );
    if json {
        print_json(&summary)
    } else {
        print!("{}", render_table(&summary, TableFormat::Markdown));
        print_mc_footer(&summary);
        Ok(())
    }
}

fn print_mc_footer(summary: &McSummary) {
    println!(
        "replications: {} (nonlattice: {} used, {} failed; lattice: {} used, {} failed)",
        summary.reps,
        summary.nonlattice.used,
        summary.nonlattice.failures,
        summary.lattice.used,
        summary.lattice.failures
    );
    if summary.sd_degenerate {
        println!("note: at most one usable replication, SDs reported as 0");
    }
}

fn cmd_validate(json: bool, spec_path: &Path, tree: bool) -> Result<()> {
    let spec_file = SpecFile::load(spec_path)?;
    let ts = spec_file.thresholds.as_ref().ok_or_else(|| {
        Error::Data("spec file declares no thresholds to validate".into())
    })?;
    let violations = ts.coherency_violations(VALIDATE_TOL);
    let hierarchy = ts.detect_hierarchy(VALIDATE_TOL);
    if json {
        print_json(&serde_json::json!({
            "m": [ts.spec().m1, ts.spec().m2],
            "coherent": violations.is_empty(),
            "violations": violations
                .iter()
                .map(|&(j1, j2, gap)| serde_json::json!({"j1": j1, "j2": j2, "gap": gap}))
                .collect::<Vec<_>>(),
            "hierarchical": hierarchy.is_some(),
            "tree": if tree { serde_json::to_value(&hierarchy)? } else { serde_json::Value::Null },
        }))?;
    } else {
        println!("structure: {}x{} grid", ts.spec().m1, ts.spec().m2);
        if violations.is_empty() {
            println!("coherent: yes");
        } else {
            println!("coherent: no, {} corner violation(s)", violations.len());
            for (j1, j2, gap) in &violations {
                println!("  corner ({j1}, {j2}): smaller boundary jump {}", format_sig(*gap));
            }
        }
        match &hierarchy {
            Some(t) => {
                println!("hierarchical: yes");
                if tree {
                    print!("{t}");
                }
            }
            None => println!("hierarchical: no"),
        }
    }
    if let Some(&(j1, j2, _)) = violations.first() {
        return Err(Error::Incoherent {
            count: violations.len(),
            j1,
            j2,
        });
    }
    Ok(())
}

fn cmd_probtable(
    json: bool,
    spec_path: &Path,
    params_path: &Path,
    x1: &[f64],
    x2: &[f64],
) -> Result<()> {
    let spec_file = SpecFile::load(spec_path)?;
    let params = load_params(params_path)?;
    let spec = spec_file.response_spec()?;
    if params.thresholds.spec() != spec {
        return Err(Error::DimensionMismatch(format!(
            "parameters are for a {}x{} grid, spec declares {}x{}",
            params.thresholds.spec().m1,
            params.thresholds.spec().m2,
            spec.m1,
            spec.m2
        )));
    }
    for (eq, (given, declared)) in [(1, (x1.len(), spec_file.x1.len())), (2, (x2.len(), spec_file.x2.len()))] {
        if given != declared {
            return Err(Error::DimensionMismatch(format!(
                "--x{eq} has {given} values, spec declares {declared} columns"
            )));
        }
    }
    if params.beta1.len() != x1.len() || params.beta2.len() != x2.len() {
        return Err(Error::DimensionMismatch(format!(
            "parameters have {}+{} slopes, covariate points have {}+{}",
            params.beta1.len(),
            params.beta2.len(),
            x1.len(),
            x2.len()
        )));
    }
    let grid = cell_prob_matrix(&params, x1, x2);
    let total: f64 = grid.iter().flatten().sum();
    if json {
        print_json(&serde_json::json!({
            "m": [spec.m1, spec.m2],
            "x1": x1,
            "x2": x2,
            "prob": grid,
            "total": total,
        }))
    } else {
        print!("{:<6}", "");
        for j2 in 1..=spec.m2 {
            print!(" {:>9}", format!("j2={j2}"));
        }
        println!();
        for (j1, row) in grid.iter().enumerate() {
            print!("j1={:<3}", j1 + 1);
            for p in row {
                print!(" {:>9}", format_sig(*p));
            }
            println!();
        }
        println!("total: {}", format_sig(total));
        Ok(())
    }
}

fn cmd_mrc(json: bool, data_path: &Path, dim: usize, exclusive: Vec<usize>) -> Result<()> {
    let data = read_dataset_csv(data_path)?;
    let cfg = MrcConfig::new(dim, exclusive);
    let fit = fit_mrc(&data, &cfg)?;
    if json {
        print_json(&fit)
    } else {
        let coeffs: Vec<String> = std::iter::once("1.000".to_string())
            .chain(fit.b_free.iter().map(|b| format_sig(*b)))
            .collect();
        println!(
            "dimension {dim}, exclusive columns {:?}",
            cfg.exclusive
        );
        println!("coefficients (first normalized): [{}]", coeffs.join(", "));
        println!("objective: {}", format_sig(fit.objective));
        println!("grid resolution: {}", format_sig(fit.resolution));
        Ok(())
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}
