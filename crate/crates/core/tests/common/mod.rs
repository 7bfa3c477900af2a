//! Shared oracles for the integration suites: adaptive quadrature over
//! the inverse Gaussian density, independent of the closed-form CDF it
//! is used to check.

use igbeat::igdist::{self, IGParams};

/// Adaptive Simpson on [a, b].
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, fa, m, fm, flm, left, tol / 2.0, depth - 1)
                + rec(f, m, fm, b, fb, frm, right, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, fa, b, fb, fm);
    rec(f, a, fa, b, fb, fm, whole, tol, depth)
}

/// Integration window: outside [lo, hi] the density exponent is below
/// -80 on the left and -120 on the right, so the excluded mass is
/// negligible at 1e-10.
pub fn ig_support(p: &IGParams) -> (f64, f64) {
    let mu = p.mu();
    let lambda = p.lambda();
    let b_lo = 2.0 * mu + 160.0 * mu * mu / lambda;
    let lo = (b_lo - (b_lo * b_lo - 4.0 * mu * mu).sqrt()) / 2.0;
    let b_hi = 2.0 * mu + 240.0 * mu * mu / lambda;
    let hi = (b_hi + (b_hi * b_hi - 4.0 * mu * mu).sqrt()) / 2.0;
    ((lo * 0.5).max(1e-300), hi)
}

/// Breakpoints that resolve both the spike near the mode (sigma-spaced
/// around mu) and the heavy tail (geometric doubling).
fn ig_breakpoints(p: &IGParams, lo: f64, hi: f64, extra: &[f64]) -> Vec<f64> {
    let mut pts = vec![lo];
    let mut x = lo;
    while x < hi {
        x *= 2.0;
        pts.push(x.min(hi));
    }
    let sigma = p.sigma();
    let mu = p.mu();
    let mut j = -40.0f64;
    while j <= 40.0 {
        let t = mu + j * sigma;
        if t > lo && t < hi {
            pts.push(t);
        }
        j += 4.0;
    }
    pts.extend(extra.iter().copied().filter(|&q| q > lo && q < hi));
    pts.push(hi);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-300);
    pts
}

/// Quadrature of exp(log_pdf): total mass over the effective support,
/// plus the cumulative integral at each (sorted) query point.
pub fn ig_quadrature_mass_and_cdf(p: &IGParams, queries: &[f64]) -> (f64, Vec<f64>) {
    let (lo, hi) = ig_support(p);
    let mut qs = queries.to_vec();
    qs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pts = ig_breakpoints(p, lo, hi, &qs);
    let f = |x: f64| igdist::log_pdf(x, p).unwrap().exp();

    let mut cum = Vec::with_capacity(pts.len());
    let mut total = 0.0;
    cum.push(0.0);
    for w in pts.windows(2) {
        total += adaptive_simpson(&f, w[0], w[1], 1e-12, 44);
        cum.push(total);
    }
    let at = |q: f64| -> f64 {
        if q <= lo {
            return 0.0;
        }
        if q >= hi {
            return total;
        }
        // Breakpoints include every query, so an exact hit exists.
        match pts.binary_search_by(|v| v.partial_cmp(&q).unwrap()) {
            Ok(i) => cum[i],
            Err(i) => cum[i.saturating_sub(1)],
        }
    };
    let cdfs = qs.iter().map(|&q| at(q)).collect();
    (total, cdfs)
}
