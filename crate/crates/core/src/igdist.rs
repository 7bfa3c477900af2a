//! Inverse Gaussian distribution core.
//!
//! The next R-R interval is modeled as IG(mu, lambda) with density
//!
//! ```text
//! p(x) = sqrt(lambda / (2 pi x^3)) * exp(-lambda (x - mu)^2 / (2 mu^2 x))
//! ```
//!
//! Parameters are carried as (mu, sigma) with the shape parameter recovered
//! through `lambda = mu^3 / sigma^2`. All quantities are in seconds.

use crate::special::{norm_cdf, norm_log_cdf};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IgError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory has {params} parameter pairs but {targets} targets")]
    LengthMismatch { params: usize, targets: usize },
}

fn check_positive(name: &'static str, value: f64) -> Result<(), IgError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(IgError::NonPositive { name, value })
    }
}

/// Conditional mean and standard deviation of the next interval, both in
/// seconds and strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IGParams {
    mu: f64,
    sigma: f64,
}

impl IGParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, IgError> {
        check_positive("mu", mu)?;
        check_positive("sigma", sigma)?;
        let p = IGParams { mu, sigma };
        check_positive("lambda", p.lambda())?;
        Ok(p)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Shape parameter `lambda = mu^3 / sigma^2`.
    pub fn lambda(&self) -> f64 {
        self.mu.powi(3) / (self.sigma * self.sigma)
    }
}

/// Shape parameter from (mu, sigma): `lambda = mu^3 / sigma^2`.
pub fn lambda_from(mu: f64, sigma: f64) -> Result<f64, IgError> {
    check_positive("mu", mu)?;
    check_positive("sigma", sigma)?;
    Ok(mu.powi(3) / (sigma * sigma))
}

/// Standard deviation from (mu, lambda): `sigma = sqrt(mu^3 / lambda)`.
/// Inverse of [`lambda_from`].
pub fn sigma_from(mu: f64, lambda: f64) -> Result<f64, IgError> {
    check_positive("mu", mu)?;
    check_positive("lambda", lambda)?;
    Ok((mu.powi(3) / lambda).sqrt())
}

/// Per-step (mu, sigma) pairs aligned with the observed next intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct IGTrajectory {
    params: Vec<IGParams>,
    targets: Vec<f64>,
}

impl IGTrajectory {
    pub fn new(params: Vec<IGParams>, targets: Vec<f64>) -> Result<Self, IgError> {
        if params.len() != targets.len() {
            return Err(IgError::LengthMismatch {
                params: params.len(),
                targets: targets.len(),
            });
        }
        for &t in &targets {
            check_positive("target interval", t)?;
        }
        Ok(IGTrajectory { params, targets })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[IGParams] {
        &self.params
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn steps(&self) -> impl Iterator<Item = (&IGParams, f64)> {
        self.params.iter().zip(self.targets.iter().copied())
    }
}

/// Log-density of IG(mu, lambda) at x, with lambda = mu^3 / sigma^2.
pub fn log_pdf(x: f64, p: &IGParams) -> Result<f64, IgError> {
    check_positive("x", x)?;
    let lambda = p.lambda();
    let d = x - p.mu;
    Ok(
        0.5 * (lambda.ln() - (2.0 * PI * x.powi(3)).ln())
            - lambda * d * d / (2.0 * p.mu * p.mu * x),
    )
}

/// CDF of IG(mu, lambda) at x, using the two-Phi closed form
///
/// ```text
/// F(x) = Phi(sqrt(lambda/x) (x/mu - 1))
///      + exp(2 lambda/mu) Phi(-sqrt(lambda/x) (x/mu + 1))
/// ```
///
/// The second term is evaluated as `exp(2 lambda/mu + log Phi(-b))`; the
/// exponent is always <= 0, so the product never overflows even when
/// `lambda/mu` runs into the hundreds.
pub fn cdf(x: f64, p: &IGParams) -> Result<f64, IgError> {
    check_positive("x", x)?;
    let lambda = p.lambda();
    let s = (lambda / x).sqrt();
    let a = s * (x / p.mu - 1.0);
    let b = s * (x / p.mu + 1.0);
    let tail = (2.0 * lambda / p.mu + norm_log_cdf(-b)).exp();
    Ok((norm_cdf(a) + tail).clamp(0.0, 1.0))
}

/// Exact draw from IG(mu, lambda) via the Michael-Schucany-Haas transform:
/// one chi-square(1) variate, then root selection with probability
/// `mu / (mu + root)`.
pub fn sample<R: Rng + ?Sized>(p: &IGParams, rng: &mut R) -> f64 {
    let mu = p.mu;
    let lambda = p.lambda();
    let z: f64 = rng.sample(StandardNormal);
    let v = z * z;
    let w = mu * v;
    let x1 = mu + mu / (2.0 * lambda) * (w - (w * (4.0 * lambda + w)).sqrt());
    let u: f64 = rng.random::<f64>();
    if u <= mu / (mu + x1) {
        x1
    } else {
        mu * mu / x1
    }
}

/// Per-step negative log-likelihood in the (mu, sigma) parameterization:
///
/// ```text
/// l = 1/2 log(2 pi x^3 sigma^2 / mu^3) + mu (x - mu)^2 / (2 sigma^2 x)
/// ```
///
/// Algebraically equal to `-log_pdf(x, p)`.
pub fn nll_step(x_next: f64, p: &IGParams) -> Result<f64, IgError> {
    check_positive("x_next", x_next)?;
    let d = x_next - p.mu;
    let s2 = p.sigma * p.sigma;
    Ok(0.5 * (2.0 * PI * x_next.powi(3) * s2 / p.mu.powi(3)).ln()
        + p.mu * d * d / (2.0 * s2 * x_next))
}

/// Total negative log-likelihood: sum of [`nll_step`] over the trajectory.
pub fn nll_total(traj: &IGTrajectory) -> Result<f64, IgError> {
    if traj.is_empty() {
        return Err(IgError::EmptyTrajectory);
    }
    let mut total = 0.0;
    for (p, x) in traj.steps() {
        total += nll_step(x, p)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Adaptive Simpson quadrature, the independent oracle for pdf/cdf
    /// checks. Integrates over geometric panels so the narrow density
    /// spike at small lambda is never stepped over.
    fn quad_pdf(p: &IGParams, hi: f64) -> f64 {
        let lambda = p.lambda();
        let mu = p.mu;
        // Smaller root of lambda (x-mu)^2 = 160 mu^2 x: below it the
        // density is under e^-80 and contributes nothing at 1e-10.
        let b = 2.0 * mu + 160.0 * mu * mu / lambda;
        let lo = (b - (b * b - 4.0 * mu * mu).sqrt()) / 2.0;
        let lo = (lo * 0.5).max(1e-300).min(hi * 0.5);
        let f = |x: f64| log_pdf(x, p).unwrap().exp();
        let mut total = 0.0;
        let mut a = lo;
        while a < hi {
            let b_edge = (a * 2.0).min(hi);
            total += adaptive_simpson(&f, a, b_edge, 1e-12, 40);
            a = b_edge;
        }
        total
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
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

    fn upper_cutoff(p: &IGParams) -> f64 {
        // Larger root of lambda (x-mu)^2 = 240 mu^2 x; the tail mass
        // beyond it is far below 1e-10.
        let lambda = p.lambda();
        let mu = p.mu;
        let b = 2.0 * mu + 240.0 * mu * mu / lambda;
        (b + (b * b - 4.0 * mu * mu).sqrt()) / 2.0
    }

    #[test]
    fn lambda_identity_case() {
        assert_eq!(lambda_from(1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn lambda_direct_evaluation() {
        let l = lambda_from(0.8, 0.05).unwrap();
        assert!((l - 204.8).abs() < 1e-12);
    }

    #[test]
    fn lambda_sigma_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mu = rng.random_range(0.3..2.0);
            let sigma = rng.random_range(0.0111..2.118);
            let back = sigma_from(mu, lambda_from(mu, sigma).unwrap()).unwrap();
            assert!((back - sigma).abs() / sigma < 1e-12);
        }
    }

    #[test]
    fn lambda_rejects_non_positive() {
        assert!(lambda_from(0.0, 1.0).is_err());
        assert!(lambda_from(1.0, -0.1).is_err());
        assert!(sigma_from(1.0, 0.0).is_err());
    }

    #[test]
    fn log_pdf_at_mode_identity_params() {
        // x = mu kills the exponent; at mu = sigma = 1, lambda = 1 and
        // the density is 1/sqrt(2 pi).
        let p = IGParams::new(1.0, 1.0).unwrap();
        let lp = log_pdf(1.0, &p).unwrap();
        assert!((lp - (1.0 / (2.0 * PI).sqrt()).ln()).abs() < 1e-12);
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_at_mean_closed_form() {
        let p = IGParams::new(0.8, 0.05).unwrap();
        let expected = 0.5 * (204.8 / (2.0 * PI * 0.8f64.powi(3))).ln();
        assert!((log_pdf(0.8, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_rejects_non_positive_x() {
        let p = IGParams::new(1.0, 1.0).unwrap();
        assert!(log_pdf(0.0, &p).is_err());
        assert!(log_pdf(-1.0, &p).is_err());
    }

    #[test]
    fn pdf_integrates_to_one() {
        let p = IGParams::new(0.9, 0.1).unwrap();
        let mass = quad_pdf(&p, 20.0);
        assert!((mass - 1.0).abs() < 1e-8, "mass = {mass}");
    }

    #[test]
    fn pdf_integrates_to_one_heavy_tail() {
        let p = IGParams::new(0.3, 2.0).unwrap();
        let mass = quad_pdf(&p, upper_cutoff(&p));
        assert!((mass - 1.0).abs() < 1e-8, "mass = {mass}");
    }

    #[test]
    fn cdf_standard_point() {
        // Quadrature oracle gives 0.668102 for x=1, mu=1, sigma=1; the
        // closed form Phi(0) + e^2 Phi(-2) agrees.
        let p = IGParams::new(1.0, 1.0).unwrap();
        let c = cdf(1.0, &p).unwrap();
        assert!((c - 0.6681).abs() < 1e-4);
        let alg = 0.5 + (2.0f64).exp() * norm_cdf(-2.0);
        assert!((c - alg).abs() < 1e-12);
    }

    #[test]
    fn cdf_limits() {
        let p = IGParams::new(1.0, 1.0).unwrap();
        assert!(cdf(1e-12, &p).unwrap() < 1e-15);
        let upper = cdf(100.0, &p).unwrap();
        assert!(1.0 - upper < 1e-10, "upper = {upper}");
    }

    #[test]
    fn cdf_median_below_mean() {
        // IG is right-skewed, so F(mu) is a bit above one half.
        let p = IGParams::new(0.8, 0.05).unwrap();
        let c = cdf(0.8, &p).unwrap();
        assert!(c > 0.5 && c < 0.55, "F(mu) = {c}");
    }

    #[test]
    fn cdf_no_overflow_at_large_shape() {
        // lambda/mu > 500: the naive e^(2 lambda/mu) Phi(-b) product
        // would overflow long before this.
        let p = IGParams::new(1.0, 0.0111).unwrap();
        for &x in &[0.5, 0.9, 1.0, 1.1, 2.0] {
            let c = cdf(x, &p).unwrap();
            assert!(c.is_finite() && (0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn cdf_matches_quadrature_at_interior_points() {
        let p = IGParams::new(0.9, 0.1).unwrap();
        for &x in &[0.6, 0.8, 0.9, 1.0, 1.3] {
            let f = |t: f64| log_pdf(t, &p).unwrap().exp();
            let mut mass = 0.0;
            let mut a: f64 = 0.4;
            while a < x {
                let b = (a * 1.5).min(x);
                mass += adaptive_simpson(&f, a, b, 1e-13, 40);
                a = b;
            }
            let c = cdf(x, &p).unwrap();
            assert!((c - mass).abs() < 1e-8, "x={x}: cdf={c} quad={mass}");
        }
    }

    #[test]
    fn cdf_nondecreasing_and_matches_pdf_derivative() {
        let p = IGParams::new(0.8, 0.2).unwrap();
        let h = 1e-6;
        let mut prev = 0.0;
        for i in 1..200 {
            let x = 0.05 + 0.02 * i as f64;
            let c = cdf(x, &p).unwrap();
            assert!(c >= prev);
            prev = c;
            let deriv = (cdf(x + h, &p).unwrap() - cdf(x - h, &p).unwrap()) / (2.0 * h);
            let pdf = log_pdf(x, &p).unwrap().exp();
            assert!((deriv - pdf).abs() < 1e-6, "x={x}: {deriv} vs {pdf}");
        }
    }

    #[test]
    fn sample_moments_match_analytic() {
        let p = IGParams::new(0.8, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = sample(&p, &mut rng);
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((mean - 0.8).abs() < 0.001, "mean = {mean}");
        // Analytic variance mu^3/lambda = sigma^2 = 0.0025.
        assert!((var - 0.0025).abs() < 0.0025 * 0.05, "var = {var}");
    }

    #[test]
    fn sample_consistent_with_cdf() {
        let p = IGParams::new(0.8, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000usize;
        let mut draws: Vec<f64> = (0..n).map(|_| sample(&p, &mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let f = cdf(x, &p).unwrap();
            let hi = (i + 1) as f64 / n as f64;
            let lo = i as f64 / n as f64;
            ks = ks.max((f - hi).abs()).max((f - lo).abs());
        }
        assert!(ks < 1.36 / (n as f64).sqrt(), "ks = {ks}");
    }

    #[test]
    fn nll_step_at_mean() {
        let p = IGParams::new(1.0, 1.0).unwrap();
        let v = nll_step(1.0, &p).unwrap();
        assert!((v - 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_step_is_negative_log_pdf() {
        // Targets are drawn from the distribution itself, which is where
        // the likelihood is ever evaluated; there the two routes agree to
        // well under 1e-12 absolute.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let mu = rng.random_range(0.3..2.0);
            let sigma = rng.random_range(0.0111..2.118);
            let p = IGParams::new(mu, sigma).unwrap();
            let x = sample(&p, &mut rng).max(1e-9);
            let diff = nll_step(x, &p).unwrap() + log_pdf(x, &p).unwrap();
            assert!(diff.abs() < 1e-12, "mu={mu} sigma={sigma} x={x}: {diff}");
        }
    }

    #[test]
    fn nll_step_cross_check_point() {
        let p = IGParams::new(0.8, 0.05).unwrap();
        let v = nll_step(0.9, &p).unwrap();
        assert!((v + log_pdf(0.9, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nll_total_single_step() {
        let p = IGParams::new(0.8, 0.05).unwrap();
        let traj = IGTrajectory::new(vec![p], vec![0.82]).unwrap();
        assert_eq!(nll_total(&traj).unwrap(), nll_step(0.82, &p).unwrap());
    }

    #[test]
    fn nll_total_additive() {
        let p = IGParams::new(0.8, 0.05).unwrap();
        let q = IGParams::new(1.1, 0.2).unwrap();
        let one = IGTrajectory::new(vec![p], vec![0.82]).unwrap();
        let two = IGTrajectory::new(vec![p, p], vec![0.82, 0.82]).unwrap();
        assert!((nll_total(&two).unwrap() - 2.0 * nll_total(&one).unwrap()).abs() < 1e-12);

        let left = IGTrajectory::new(vec![p, q], vec![0.82, 1.0]).unwrap();
        let right = IGTrajectory::new(vec![q, p], vec![0.5, 0.7]).unwrap();
        let cat = IGTrajectory::new(vec![p, q, q, p], vec![0.82, 1.0, 0.5, 0.7]).unwrap();
        let sum = nll_total(&left).unwrap() + nll_total(&right).unwrap();
        assert!((nll_total(&cat).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn nll_total_empty_is_error() {
        let traj = IGTrajectory::new(vec![], vec![]).unwrap();
        assert_eq!(nll_total(&traj), Err(IgError::EmptyTrajectory));
    }

    #[test]
    fn trajectory_validates_inputs() {
        let p = IGParams::new(1.0, 1.0).unwrap();
        assert!(IGTrajectory::new(vec![p], vec![]).is_err());
        assert!(IGTrajectory::new(vec![p], vec![-0.5]).is_err());
    }
}
