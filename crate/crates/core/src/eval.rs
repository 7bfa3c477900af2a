//! Goodness-of-fit through the time-rescaling theorem.
//!
//! Observed intervals pushed through the fitted conditional CDF,
//! `u_i = F_IG(x_{i+1} | mu_i, sigma_i)`, are i.i.d. uniform exactly when
//! the model is correct. The Kolmogorov-Smirnov distance of the sorted
//! `u` against the mid-rank quantiles `(i - 0.5)/n` is compared with the
//! 5% bound `1.36/sqrt(n)`.

use crate::igdist::{self, IGTrajectory, IgError};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no rescaled samples")]
    Empty,
    #[error(transparent)]
    Distribution(#[from] IgError),
}

/// KS assessment of one rescaled sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct KSReport {
    /// Rescaled samples in original order.
    pub u: Vec<f64>,
    /// (empirical quantile (i - 0.5)/n, sorted u) pairs.
    pub sorted_pairs: Vec<(f64, f64)>,
    /// Maximum deviation from the identity line.
    pub ksd: f64,
    /// 5% significance bound, 1.36/sqrt(n).
    pub bound: f64,
    pub pass: bool,
    /// Lag-1 autocorrelation of u, reported for the independence part of
    /// the time-rescaling theorem; not part of the pass criterion.
    pub lag1_autocorr: f64,
}

/// 5% KS bound for n samples.
pub fn ks_bound(n: usize) -> f64 {
    1.36 / (n as f64).sqrt()
}

/// CDF transform of each observed interval under its fitted parameters.
pub fn rescale(traj: &IGTrajectory) -> Result<Vec<f64>, EvalError> {
    let mut u = Vec::with_capacity(traj.len());
    for (p, x) in traj.steps() {
        u.push(igdist::cdf(x, p)?);
    }
    Ok(u)
}

/// KS distance of `u` against the uniform identity line with mid-rank
/// plotting positions.
pub fn ks_distance(u: &[f64]) -> Result<KSReport, EvalError> {
    if u.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = u.len();
    let mut sorted = u.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ksd: f64 = 0.0;
    let mut sorted_pairs = Vec::with_capacity(n);
    for (i, &ui) in sorted.iter().enumerate() {
        let q = (i as f64 + 0.5) / n as f64;
        ksd = ksd.max((ui - q).abs());
        sorted_pairs.push((q, ui));
    }
    let bound = ks_bound(n);

    let lag1_autocorr = if n >= 2 {
        let mean = u.iter().sum::<f64>() / n as f64;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var > 0.0 {
            let cov = u
                .windows(2)
                .map(|w| (w[0] - mean) * (w[1] - mean))
                .sum::<f64>()
                / (n - 1) as f64;
            cov / var
        } else {
            0.0
        }
    } else {
        0.0
    };

    Ok(KSReport {
        u: u.to_vec(),
        sorted_pairs,
        ksd,
        bound,
        pass: ksd < bound,
        lag1_autocorr,
    })
}

/// KS-plot data as CSV: one row per sample with the identity band, so the
/// plot is reproducible from the file alone.
pub fn ks_plot_csv(report: &KSReport) -> String {
    let mut out = String::from("q,u,lower_band,upper_band\n");
    for &(q, u) in &report.sorted_pairs {
        let _ = writeln!(
            out,
            "{q:?},{u:?},{:?},{:?}",
            q - report.bound,
            q + report.bound
        );
    }
    out
}

/// KS plot as a standalone SVG: empirical quantile pairs, the identity
/// line, the +-bound band, and (when the test fails) a marker at the
/// maximal deviation.
pub fn ks_plot_svg(report: &KSReport) -> String {
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 40.0;
    let scale = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + v * scale;
    let py = |v: f64| SIZE - MARGIN - v * scale;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#
    );
    // Axes.
    let _ = writeln!(
        svg,
        r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="none" stroke="black"/>"#,
        MARGIN, MARGIN
    );
    // Identity and band.
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-dasharray="4 3"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for sign in [-1.0, 1.0] {
        let b = sign * report.bound;
        let (x0, y0) = if b >= 0.0 { (0.0, b) } else { (-b, 0.0) };
        let (x1, y1) = if b >= 0.0 {
            (1.0 - b, 1.0)
        } else {
            (1.0, 1.0 + b)
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="2 3"/>"#,
            px(x0),
            py(y0),
            px(x1),
            py(y1)
        );
    }
    // Empirical curve.
    let pts: Vec<String> = report
        .sorted_pairs
        .iter()
        .map(|&(q, u)| format!("{:.2},{:.2}", px(q), py(u)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        pts.join(" ")
    );
    if !report.pass {
        if let Some(&(q, u)) = report
            .sorted_pairs
            .iter()
            .max_by(|a, b| (a.1 - a.0).abs().partial_cmp(&(b.1 - b.0).abs()).unwrap())
        {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="none" stroke="red" stroke-width="2"/>"#,
                px(q),
                py(u)
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13">KSD = {:.4}, bound = {:.4} ({})</text>"#,
        MARGIN,
        MARGIN - 10.0,
        report.ksd,
        report.bound,
        if report.pass { "pass" } else { "fail" }
    );
    svg.push_str("</svg>\n");
    svg
}
