//! Gaussian numerics: univariate and bivariate normal CDFs, the inverse
//! normal CDF, densities, a slow quadrature oracle and correlated sampling.
//!
//! `bvn_cdf` is a port of the Drezner-Wesolowsky / Genz algorithm: Gauss-
//! Legendre quadrature over a transformed correlation integral for
//! |rho| <= 0.925 and an asymptotic expansion with correction quadrature
//! beyond. Absolute error is below 1e-14 for |rho| <= 0.925 and below 1e-10
//! for larger |rho|. `bvn_cdf_oracle` integrates the explicit density over a
//! truncated box instead and is used to cross-check `bvn_cdf` in tests.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand_core::RngCore;
use libm::erfc;

use crate::seed::standard_uniform;

const SQRT_2PI: f64 = 2.506628274631000502415765284811;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    if !x.is_finite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse standard normal CDF. Rational approximation (Acklam) refined by
/// one Halley step; `cdf(inv_cdf(p))` reproduces p to ~1e-15 relative over
/// [1e-12, 1 - 1e-12]. Out-of-range p maps to +/- infinity.
pub fn std_normal_inv_cdf(p: f64) -> f64 {
    if p.is_nan() {
        return f64::NAN;
    }
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }

    // Coefficient digits kept exactly as published.
    #[allow(clippy::excessive_precision)]
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| -> f64 {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };

    // One Halley step: u = (cdf(x) - p) / pdf(x), x <- x - u / (1 + x u / 2).
    let pdf = norm_pdf(x);
    if pdf > 0.0 {
        let u = (std_normal_cdf(x) - p) / pdf;
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Bivariate standard normal density with correlation `rho`.
pub fn bvn_pdf(x: f64, y: f64, rho: f64) -> f64 {
    if !x.is_finite() || !y.is_finite() {
        return 0.0;
    }
    let omr2 = (1.0 - rho) * (1.0 + rho);
    let q = (x * x - 2.0 * rho * x * y + y * y) / omr2;
    (-0.5 * q).exp() / (2.0 * PI * omr2.sqrt())
}

// Gauss-Legendre pairs (weight, abscissa) used by the transformed
// correlation integral; 6-, 12- and 20-point rules stored as half-rules
// evaluated at +/- each abscissa. Digits kept exactly as published.
#[allow(clippy::excessive_precision)]
const GL6: [(f64, f64); 3] = [
    (0.1713244923791704, 0.9324695142031521),
    (0.3607615730481386, 0.6612093864662645),
    (0.4679139345726910, 0.2386191860831969),
];
#[allow(clippy::excessive_precision)]
const GL12: [(f64, f64); 6] = [
    (0.04717533638651183, 0.9815606342467192),
    (0.1069393259953184, 0.9041172563704749),
    (0.1600783285433462, 0.7699026741943047),
    (0.2031674267230659, 0.5873179542866175),
    (0.2334925365383548, 0.3678314989981802),
    (0.2491470458134028, 0.1252334085114689),
];
#[allow(clippy::excessive_precision)]
const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, 0.9931285991850949),
    (0.04060142980038694, 0.9639719272779138),
    (0.06267204833410906, 0.9122344282513259),
    (0.08327674157670475, 0.8391169718222188),
    (0.1019301198172404, 0.7463319064601508),
    (0.1181945319615184, 0.6360536807265150),
    (0.1316886384491766, 0.5108670019508271),
    (0.1420961093183820, 0.3737060887154195),
    (0.1491729864726037, 0.2277858511416451),
    (0.1527533871307258, 0.07652652113349734),
];

fn gl_rule(rho_abs: f64) -> &'static [(f64, f64)] {
    if rho_abs < 0.3 {
        &GL6
    } else if rho_abs < 0.75 {
        &GL12
    } else {
        &GL20
    }
}

/// Upper orthant probability P(X > h, Y > k) for standard bivariate normal
/// with correlation r. Infinite bounds allowed.
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h.is_nan() || k.is_nan() || r.is_nan() {
        return f64::NAN;
    }
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY {
            1.0
        } else {
            std_normal_cdf(-k)
        };
    }
    if k == f64::NEG_INFINITY {
        return std_normal_cdf(-h);
    }
    if r == 1.0 {
        return std_normal_cdf(-h.max(k));
    }
    if r == -1.0 {
        return (std_normal_cdf(-h) - std_normal_cdf(k)).max(0.0);
    }

    let rule = gl_rule(r.abs());
    let twopi = 2.0 * PI;
    let hh = h;
    let mut kk = k;
    let mut hk = hh * kk;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        if r != 0.0 {
            let hs = 0.5 * (hh * hh + kk * kk);
            let asr = r.asin();
            for &(w, x) in rule {
                for sign in [-1.0, 1.0] {
                    let sn = (asr * (sign * x + 1.0) * 0.5).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / (2.0 * twopi);
        }
        bvn += std_normal_cdf(-hh) * std_normal_cdf(-kk);
    } else {
        // |r| >= 0.925: asymptotic expansion near |r| = 1 plus correction
        // quadrature. For r < 0 only k flips sign (the original algorithm).
        if r < 0.0 {
            kk = -kk;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let a_s = (1.0 - r) * (1.0 + r);
            let a = a_s.sqrt();
            let bs = (hh - kk) * (hh - kk);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -0.5 * (bs / a_s + hk);
            if asr > -100.0 {
                bvn = a * asr.exp() * (1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0
                    + c * d * a_s * a_s / 5.0);
            }
            if -hk < 100.0 {
                let b = bs.sqrt();
                bvn -= (-0.5 * hk).exp()
                    * SQRT_2PI
                    * std_normal_cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            let ah = 0.5 * a;
            for &(w, x) in rule {
                for sign in [-1.0, 1.0] {
                    let xs = (ah * (sign * x + 1.0)) * (ah * (sign * x + 1.0));
                    let rs = (1.0 - xs).sqrt();
                    let asr2 = -0.5 * (bs / xs + hk);
                    if asr2 > -100.0 {
                        bvn += ah
                            * w
                            * asr2.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn = -bvn / twopi;
        }
        if r > 0.0 {
            bvn += std_normal_cdf(-hh.max(kk));
        } else {
            bvn = -bvn;
            if kk > hh {
                bvn += std_normal_cdf(kk) - std_normal_cdf(hh);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Bivariate standard normal CDF P(X <= a, Y <= b) with correlation `rho`.
/// Bounds may be infinite; `rho` in [-1, 1] with the degenerate endpoints
/// reducing to univariate expressions.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> f64 {
    debug_assert!((-1.0..=1.0).contains(&rho), "correlation outside [-1, 1]");
    bvn_upper(-a, -b, rho)
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1], computed
/// by Newton iteration on the Legendre recurrence (no shared tables with
/// `bvn_cdf`).
fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..64 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        ws[i] = w;
        xs[n - 1 - i] = x;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

/// Composite tensor Gauss-Legendre integral of the bivariate normal density
/// over [lo, ax] x [lo, bx] with the given panel width.
fn density_box_integral(
    ax: f64,
    bx: f64,
    rho: f64,
    lo: f64,
    width: f64,
    nodes: &[f64],
    weights: &[f64],
) -> f64 {
    let build_axis = |hi: f64| -> (Vec<f64>, Vec<f64>) {
        let panels = ((hi - lo) / width).ceil().max(1.0) as usize;
        let step = (hi - lo) / panels as f64;
        let mut pts = Vec::with_capacity(panels * nodes.len());
        let mut wts = Vec::with_capacity(panels * nodes.len());
        for p in 0..panels {
            let a = lo + p as f64 * step;
            let mid = a + 0.5 * step;
            let half = 0.5 * step;
            for (x, w) in nodes.iter().zip(weights) {
                pts.push(mid + half * x);
                wts.push(half * w);
            }
        }
        (pts, wts)
    };
    let (xs, wxs) = build_axis(ax);
    let (ys, wys) = build_axis(bx);

    let omr2 = (1.0 - rho) * (1.0 + rho);
    let norm = 1.0 / (2.0 * PI * omr2.sqrt());
    let mut total = 0.0;
    for (x, wx) in xs.iter().zip(&wxs) {
        let mut row = 0.0;
        for (y, wy) in ys.iter().zip(&wys) {
            let q = (x * x - 2.0 * rho * x * y + y * y) / omr2;
            row += wy * (-0.5 * q).exp();
        }
        total += wx * row;
    }
    total * norm
}

/// Slow reference for `bvn_cdf`: adaptive tensor quadrature of the explicit
/// density over the truncated box [-8.5, min(a, 8.5)] x [-8.5, min(b, 8.5)].
/// Panel widths halve until two refinements agree to 1e-13; requires
/// |rho| < 1. Used by tests; orders of magnitude slower than `bvn_cdf`.
pub fn bvn_cdf_oracle(a: f64, b: f64, rho: f64) -> f64 {
    assert!(rho > -1.0 && rho < 1.0, "oracle requires |rho| < 1");
    const LO: f64 = -8.5;
    let ax = a.min(8.5);
    let bx = b.min(8.5);
    if ax <= LO || bx <= LO {
        return 0.0;
    }
    let (nodes, weights) = legendre_rule(24);
    let mut width = 3.0;
    let mut prev = density_box_integral(ax, bx, rho, LO, width, &nodes, &weights);
    for _ in 0..4 {
        width *= 0.5;
        let cur = density_box_integral(ax, bx, rho, LO, width, &nodes, &weights);
        if (cur - prev).abs() <= 1e-13 * cur.abs().max(1.0) {
            return cur;
        }
        prev = cur;
    }
    prev
}

/// Standard normal draw by inverse-CDF of a uniform (bit-stable given the
/// generator stream).
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    std_normal_inv_cdf(standard_uniform(rng))
}

/// One draw from the standard bivariate normal with correlation `rho`:
/// e1 = z1, e2 = rho z1 + sqrt(1 - rho^2) z2 with z1, z2 independent draws
/// taken from `rng` in that order.
pub fn sample_bvn<R: RngCore>(rho: f64, rng: &mut R) -> (f64, f64) {
    let z1 = standard_normal(rng);
    let z2 = standard_normal(rng);
    (z1, rho * z1 + (1.0 - rho * rho).sqrt() * z2)
}
