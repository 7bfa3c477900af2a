//! Synthetic data with known ground truth: R-R series drawn from a
//! prescribed (mu_t, sigma_t) trajectory, and ECG traces with known R-peak
//! times. These are the oracles behind the detection, rescaling and
//! end-to-end training tests.

use crate::igdist::{self, IGParams, IGTrajectory};
use crate::preprocess::{EcgRecord, RRSeries};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("trajectory violates invariants: {0}")]
    InvalidTrajectory(String),
    #[error("need at least 2 beats, got {0}")]
    TooFewBeats(usize),
}

/// Prescribed evolution of the generating IG parameters.
///
/// The sinusoidal kind modulates the mean with a fixed period in seconds,
/// mimicking respiratory sinus arrhythmia (typical period a few seconds);
/// the regime switch jumps between (mu, sigma) levels on a beat schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamTrajectory {
    Constant {
        mu: f64,
        sigma: f64,
    },
    Sinusoidal {
        base_mu: f64,
        sigma: f64,
        amplitude: f64,
        period_s: f64,
    },
    /// Consecutive (beat count, mu, sigma) regimes; the last regime
    /// extends indefinitely.
    RegimeSwitch {
        regimes: Vec<(usize, f64, f64)>,
    },
}

const MU_MIN: f64 = 0.3;
const SIGMA_MIN: f64 = 0.0111;
const SIGMA_MAX: f64 = 2.118;

impl ParamTrajectory {
    /// Generating parameters for the interval that starts at time `t`
    /// (seconds since the first beat) with beat index `i`.
    fn at(&self, t: f64, i: usize) -> (f64, f64) {
        match self {
            ParamTrajectory::Constant { mu, sigma } => (*mu, *sigma),
            ParamTrajectory::Sinusoidal {
                base_mu,
                sigma,
                amplitude,
                period_s,
            } => {
                let mu = base_mu + amplitude * (2.0 * std::f64::consts::PI * t / period_s).sin();
                (mu, *sigma)
            }
            ParamTrajectory::RegimeSwitch { regimes } => {
                let mut idx = i;
                for &(len, mu, sigma) in regimes {
                    if idx < len {
                        return (mu, sigma);
                    }
                    idx -= len;
                }
                let &(_, mu, sigma) = regimes.last().expect("validated non-empty");
                (mu, sigma)
            }
        }
    }

    /// Every reachable (mu_t, sigma_t) must stay inside the range the
    /// model heads can express: mu > 0.3 s, sigma in [11.1 ms, 2.118 s].
    pub fn validate(&self) -> Result<(), SynthError> {
        let check = |mu: f64, sigma: f64| -> Result<(), SynthError> {
            if !mu.is_finite() || mu <= MU_MIN {
                return Err(SynthError::InvalidTrajectory(format!(
                    "mu {mu} must exceed {MU_MIN}"
                )));
            }
            if !(SIGMA_MIN..=SIGMA_MAX).contains(&sigma) {
                return Err(SynthError::InvalidTrajectory(format!(
                    "sigma {sigma} outside [{SIGMA_MIN}, {SIGMA_MAX}]"
                )));
            }
            Ok(())
        };
        match self {
            ParamTrajectory::Constant { mu, sigma } => check(*mu, *sigma),
            ParamTrajectory::Sinusoidal {
                base_mu,
                sigma,
                amplitude,
                period_s,
            } => {
                if *amplitude < 0.0 || !period_s.is_finite() || *period_s <= 0.0 {
                    return Err(SynthError::InvalidTrajectory(
                        "amplitude must be >= 0 and period must be positive".into(),
                    ));
                }
                check(base_mu - amplitude, *sigma)?;
                check(base_mu + amplitude, *sigma)
            }
            ParamTrajectory::RegimeSwitch { regimes } => {
                if regimes.is_empty() {
                    return Err(SynthError::InvalidTrajectory("no regimes".into()));
                }
                for &(_, mu, sigma) in regimes {
                    check(mu, sigma)?;
                }
                Ok(())
            }
        }
    }
}

/// Draw an R-R series of `n_beats` beats sequentially from the trajectory,
/// returning both the series and the generating parameters paired with
/// the intervals they produced.
pub fn generate_rr<R: Rng + ?Sized>(
    traj: &ParamTrajectory,
    n_beats: usize,
    rng: &mut R,
) -> Result<(RRSeries, IGTrajectory), SynthError> {
    traj.validate()?;
    if n_beats < 2 {
        return Err(SynthError::TooFewBeats(n_beats));
    }
    let n_intervals = n_beats - 1;
    let mut peak_times = Vec::with_capacity(n_beats);
    let mut params = Vec::with_capacity(n_intervals);
    let mut intervals = Vec::with_capacity(n_intervals);
    let mut t = 0.0;
    peak_times.push(t);
    for i in 0..n_intervals {
        let (mu, sigma) = traj.at(t, i);
        let p = IGParams::new(mu, sigma).expect("validated trajectory");
        let x = igdist::sample(&p, rng);
        params.push(p);
        intervals.push(x);
        t += x;
        peak_times.push(t);
    }
    let series = RRSeries::from_parts(peak_times, intervals.clone(), vec![true; n_intervals]);
    let truth = IGTrajectory::new(params, intervals).expect("lengths match by construction");
    Ok((series, truth))
}

/// Synthetic single-channel ECG: Gaussian R bumps (about 20 ms wide) at
/// the given peak times, smaller P and T bumps, and white noise at the
/// requested SNR. With an empty peak list the record is pure noise at
/// unit reference power.
pub fn generate_ecg<R: Rng + ?Sized>(
    peak_times: &[f64],
    fs: f64,
    snr_db: f64,
    rng: &mut R,
) -> EcgRecord {
    let duration = peak_times.last().copied().unwrap_or(0.0) + 1.0;
    let n = (duration * fs).ceil() as usize;
    let mut clean = vec![0.0f64; n.max(1)];

    // R bump sigma 8.5 ms (~20 ms full width); P 160 ms before, T 280 ms
    // after, both broader and smaller.
    let bumps: [(f64, f64, f64); 3] = [
        (0.0, 1.0, 0.0085),
        (-0.160, 0.15, 0.025),
        (0.280, 0.30, 0.050),
    ];
    for &peak in peak_times {
        for &(offset, amp, width) in &bumps {
            let center = peak + offset;
            let lo = ((center - 5.0 * width) * fs).floor().max(0.0) as usize;
            let hi = (((center + 5.0 * width) * fs).ceil() as usize).min(clean.len());
            for (k, slot) in clean.iter_mut().enumerate().take(hi).skip(lo) {
                let t = k as f64 / fs;
                let z = (t - center) / width;
                *slot += amp * (-0.5 * z * z).exp();
            }
        }
    }

    let signal_power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    let noise_std = if signal_power > 0.0 {
        (signal_power / 10f64.powf(snr_db / 10.0)).sqrt()
    } else {
        10f64.powf(-snr_db / 20.0)
    };
    let samples: Vec<f64> = clean
        .iter()
        .map(|&v| v + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();

    EcgRecord {
        samples,
        fs,
        record_id: "synthetic".to_string(),
    }
}
