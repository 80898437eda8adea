use ordino::dgp::{design, simulate};
use ordino::estimate::{fit_nonlattice, FitConfig};
use ordino::likelihood::{loglik, CoordLayout};
use ordino::model::ModelParams;
use ordino::seed::sub_seed;
use std::time::Instant;

fn design3_sd(name: &str) -> f64 {
    match name {
        "beta1[0]" => 0.03,
        "beta1[1]" => 0.07,
        "beta2[0]" => 0.13,
        "beta2[1]" => 0.25,
        "beta2[2]" => 0.05,
        "a1[1][1]" | "a1[1][2]" => 0.15,
        "a1[2][1]" => 0.11,
        "a1[2][2]" | "a1[3][1]" | "a1[3][2]" => 0.04,
        "a1[4][1]" | "a1[4][2]" => 0.05,
        "a1[5][1]" | "a1[5][2]" => 0.06,
        "a1[6][1]" => 0.07,
        "a1[6][2]" => 0.17,
        "a2[1][1]" => 0.25,
        "a2[2][1]" | "a2[3][1]" => 0.12,
        "a2[4][1]" => 0.15,
        "a2[5][1]" => 0.21,
        "a2[6][1]" | "a2[7][1]" => 0.29,
        "rho" => 0.07,
        other => panic!("unexpected design 3 coordinate {other}"),
    }
}

fn full_coordinates(layout: &CoordLayout, params: &ModelParams) -> Vec<f64> {
    let mut v = Vec::with_capacity(layout.len());
    v.extend_from_slice(&params.beta1);
    v.extend_from_slice(&params.beta2);
    for &id in layout.entries() {
        v.push(params.thresholds.entry(id));
    }
    v.push(params.rho);
    v
}

fn main() {
    let ms: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(32);
    let config = design(3).unwrap();
    let spec = config.params.thresholds.spec();
    let layout = CoordLayout::new(spec, config.k1(), config.k2());
    let names = layout.names();
    let truth = full_coordinates(&layout, &config.params);
    for rep in 0..5u64 {
        let data = simulate(&config, 5000, sub_seed(63, 2 * rep)).unwrap();
        let cfg = FitConfig {
            multistart: ms,
            grad_tol: 1e-6,
            max_iter: 400,
            seed: sub_seed(63, 2 * rep + 1),
            ..FitConfig::default()
        };
        let t = Instant::now();
        match fit_nonlattice(&data, spec, &cfg) {
            Ok(fit) => {
                let coords = full_coordinates(&layout, &fit.params);
                let mut worst = 0.0f64;
                let mut misses = Vec::new();
                for (i, name) in names.iter().enumerate() {
                    let band = 4.0 * design3_sd(name);
                    let frac = (coords[i] - truth[i]).abs() / band;
                    worst = worst.max(frac);
                    if frac > 1.0 {
                        misses.push(format!("{name} {:.4} vs {:.4}", coords[i], truth[i]));
                    }
                }
                eprintln!(
                    "rep {rep} ms{ms}: ll {:.6} (truth {:.6}) conv {} worst band frac {:.2} misses [{}] ({:.0}s)",
                    loglik(&fit.params, &data),
                    loglik(&config.params, &data),
                    fit.converged,
                    worst,
                    misses.join(", "),
                    t.elapsed().as_secs_f64()
                );
            }
            Err(e) => eprintln!("rep {rep} ms{ms}: ERR {e}"),
        }
    }
}
