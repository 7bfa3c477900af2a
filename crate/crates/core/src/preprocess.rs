//! ECG-to-clean-R-R pipeline: Pan-Tompkins R-peak detection, validity
//! filtering of intervals to [0.3, 2.0] s, and monotone PCHIP
//! interpolation of the excluded beats.
//!
//! The detector follows the classic stages (band-pass around 5-15 Hz,
//! five-point derivative, squaring, 150 ms moving-window integration,
//! dual adaptive thresholds with a 200 ms refractory period, and
//! search-back at 1.66x the running RR average), re-derived for an
//! arbitrary sample rate. All linear-phase stages are delay-compensated,
//! so detected times line up with the raw trace.

use std::fmt::Write as _;

pub const RR_MIN_S: f64 = 0.3;
pub const RR_MAX_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("record is {got:.2} s long, need at least {need:.0} s")]
    RecordTooShort { got: f64, need: f64 },
    #[error("sample rate {0} Hz is below the 100 Hz minimum")]
    SampleRateTooLow(f64),
    #[error("need at least 3 peaks, got {0}")]
    NotEnoughPeaks(usize),
    #[error("fewer than 2 valid intervals ({0} valid)")]
    NotEnoughValidIntervals(usize),
    #[error("peak times not strictly increasing at index {0}")]
    NonMonotonePeaks(usize),
    #[error("pchip: {0}")]
    Pchip(String),
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// Uniformly sampled single-channel ECG in physical units (mV).
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub record_id: String,
}

/// R-peak times with derived intervals and a per-interval validity flag.
/// `valid_mask[i]` is false where the measured interval fell outside
/// [0.3, 2.0] s and the stored value is interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct RRSeries {
    peak_times: Vec<f64>,
    intervals: Vec<f64>,
    valid_mask: Vec<bool>,
}

impl RRSeries {
    pub fn from_parts(peak_times: Vec<f64>, intervals: Vec<f64>, valid_mask: Vec<bool>) -> Self {
        debug_assert_eq!(peak_times.len(), intervals.len() + 1);
        debug_assert_eq!(intervals.len(), valid_mask.len());
        RRSeries {
            peak_times,
            intervals,
            valid_mask,
        }
    }

    pub fn peak_times(&self) -> &[f64] {
        &self.peak_times
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    /// CSV with columns `beat_index,peak_time_s,rr_s,was_interpolated`;
    /// one row per interval, indexed by the beat that closes it. Header
    /// mandatory, '.' decimal separator, LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beat_index,peak_time_s,rr_s,was_interpolated\n");
        for i in 0..self.intervals.len() {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{}",
                i + 1,
                self.peak_times[i + 1],
                self.intervals[i],
                !self.valid_mask[i]
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, PreprocessError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(PreprocessError::Csv {
            line: 1,
            msg: "empty file".into(),
        })?;
        if header.trim() != "beat_index,peak_time_s,rr_s,was_interpolated" {
            return Err(PreprocessError::Csv {
                line: 1,
                msg: format!("unexpected header '{header}'"),
            });
        }
        let mut peak_times = Vec::new();
        let mut intervals = Vec::new();
        let mut valid = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(PreprocessError::Csv {
                    line: ln + 1,
                    msg: format!("expected 4 columns, got {}", cols.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, PreprocessError> {
                s.trim().parse().map_err(|e| PreprocessError::Csv {
                    line: ln + 1,
                    msg: format!("bad number '{s}': {e}"),
                })
            };
            let t = parse(cols[1])?;
            let rr = parse(cols[2])?;
            let interp = cols[3].trim() == "true";
            if peak_times.is_empty() {
                peak_times.push(t - rr);
            }
            peak_times.push(t);
            intervals.push(rr);
            valid.push(!interp);
        }
        if intervals.is_empty() {
            return Err(PreprocessError::Csv {
                line: 1,
                msg: "no interval rows".into(),
            });
        }
        Ok(RRSeries::from_parts(peak_times, intervals, valid))
    }
}

// --- PCHIP ------------------------------------------------------------

/// Fritsch-Carlson slopes for monotone cubic Hermite interpolation:
/// weighted harmonic mean where adjacent secants share sign, zero
/// otherwise; shape-preserving three-point rule at the ends.
pub fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(PreprocessError::Pchip(format!(
            "need >= 2 knots with matching values, got {n} xs and {} ys",
            ys.len()
        )));
    }
    let mut h = vec![0.0; n - 1];
    let mut delta = vec![0.0; n - 1];
    for i in 0..n - 1 {
        h[i] = xs[i + 1] - xs[i];
        if h[i] <= 0.0 {
            return Err(PreprocessError::Pchip(format!(
                "knot indices not strictly increasing at position {}",
                i + 1
            )));
        }
        delta[i] = (ys[i + 1] - ys[i]) / h[i];
    }
    let mut d = vec![0.0; n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return Ok(d);
    }
    for i in 1..n - 1 {
        let (dl, dr) = (delta[i - 1], delta[i]);
        if dl == 0.0 || dr == 0.0 || dl.signum() != dr.signum() {
            d[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / dl + w2 / dr);
        }
    }
    d[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    Ok(d)
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s.signum() != d0.signum() {
        s = 0.0;
    } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
        s = 3.0 * d0;
    }
    s
}

/// Evaluate the monotone cubic Hermite interpolant through `knots` at
/// each query point. Queries outside the knot range take the nearest
/// boundary value.
pub fn pchip_eval(knots: &[(f64, f64)], queries: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    let xs: Vec<f64> = knots.iter().map(|k| k.0).collect();
    let ys: Vec<f64> = knots.iter().map(|k| k.1).collect();
    let d = pchip_slopes(&xs, &ys)?;
    let n = xs.len();
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        if q <= xs[0] {
            out.push(ys[0]);
            continue;
        }
        if q >= xs[n - 1] {
            out.push(ys[n - 1]);
            continue;
        }
        let seg = match xs.binary_search_by(|v| v.partial_cmp(&q).unwrap()) {
            Ok(i) => {
                out.push(ys[i]);
                continue;
            }
            Err(ins) => ins - 1,
        };
        let h = xs[seg + 1] - xs[seg];
        let t = (q - xs[seg]) / h;
        let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
        let h10 = t * (1.0 - t) * (1.0 - t);
        let h01 = t * t * (3.0 - 2.0 * t);
        let h11 = t * t * (t - 1.0);
        out.push(h00 * ys[seg] + h10 * h * d[seg] + h01 * ys[seg + 1] + h11 * h * d[seg + 1]);
    }
    Ok(out)
}

// --- interval cleaning -------------------------------------------------

/// Derive intervals from peak times, flag those outside [0.3, 2.0] s as
/// invalid, and replace them by PCHIP interpolation of the interval
/// series over beat index using only the valid points. Boundary invalids
/// with no valid neighbor on one side take the nearest valid value.
/// Replacements are clipped back into [0.3, 2.0].
pub fn clean_intervals(peaks: &[f64]) -> Result<RRSeries, PreprocessError> {
    if peaks.len() < 3 {
        return Err(PreprocessError::NotEnoughPeaks(peaks.len()));
    }
    for i in 1..peaks.len() {
        if peaks[i] <= peaks[i - 1] {
            return Err(PreprocessError::NonMonotonePeaks(i));
        }
    }
    let raw: Vec<f64> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
    let valid_mask: Vec<bool> = raw
        .iter()
        .map(|&x| (RR_MIN_S..=RR_MAX_S).contains(&x))
        .collect();
    let n_valid = valid_mask.iter().filter(|&&v| v).count();
    if n_valid < 2 {
        return Err(PreprocessError::NotEnoughValidIntervals(n_valid));
    }

    let mut intervals = raw.clone();
    if n_valid < raw.len() {
        let knots: Vec<(f64, f64)> = raw
            .iter()
            .enumerate()
            .filter(|(i, _)| valid_mask[*i])
            .map(|(i, &v)| (i as f64, v))
            .collect();
        let queries: Vec<f64> = raw
            .iter()
            .enumerate()
            .filter(|(i, _)| !valid_mask[*i])
            .map(|(i, _)| i as f64)
            .collect();
        let filled = pchip_eval(&knots, &queries)?;
        for (&q, &v) in queries.iter().zip(&filled) {
            intervals[q as usize] = v.clamp(RR_MIN_S, RR_MAX_S);
        }
    }
    Ok(RRSeries::from_parts(peaks.to_vec(), intervals, valid_mask))
}

// --- Pan-Tompkins -------------------------------------------------------

/// Windowed-sinc low-pass kernel (Hamming window), odd length.
fn sinc_lowpass(fs: f64, cutoff_hz: f64, taps: usize) -> Vec<f64> {
    let m = (taps - 1) as f64 / 2.0;
    let fc = cutoff_hz / fs;
    let mut k: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - m;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * x)
            };
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Zero-padded "same" convolution with an odd, centered kernel; the
/// output is aligned with the input (linear phase compensated).
fn convolve_same(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let n = signal.len();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let k_lo = half.saturating_sub(i);
        let k_hi = kernel.len().min(half + n - i);
        for k in k_lo..k_hi {
            acc += kernel[k] * signal[i + k - half];
        }
        *slot = acc;
    }
    out
}

/// Centered five-point derivative, delay compensated.
fn derivative(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let at = |i: isize| -> f64 {
        if i < 0 || i as usize >= n {
            0.0
        } else {
            signal[i as usize]
        }
    };
    (0..n as isize)
        .map(|i| (2.0 * at(i + 2) + at(i + 1) - at(i - 1) - 2.0 * at(i - 2)) / 8.0)
        .collect()
}

/// Centered moving-window average of the squared derivative.
fn integrate(squared: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = squared.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + squared[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / window as f64
        })
        .collect()
}

struct Thresholds {
    spk: f64,
    npk: f64,
}

impl Thresholds {
    fn thr1(&self) -> f64 {
        self.npk + 0.25 * (self.spk - self.npk)
    }

    fn thr2(&self) -> f64 {
        0.5 * self.thr1()
    }

    fn signal(&mut self, v: f64) {
        self.spk = 0.125 * v + 0.875 * self.spk;
    }

    fn noise(&mut self, v: f64) {
        self.npk = 0.125 * v + 0.875 * self.npk;
    }

    fn searchback(&mut self, v: f64) {
        self.spk = 0.25 * v + 0.75 * self.spk;
    }
}

/// Pan-Tompkins R-peak detection. Returns peak times in seconds,
/// strictly increasing with gaps of at least 200 ms; each time is the
/// local maximum of the band-passed signal within +-75 ms of the
/// integrated-signal detection.
pub fn detect_rpeaks(ecg: &EcgRecord) -> Result<Vec<f64>, PreprocessError> {
    if ecg.fs < 100.0 {
        return Err(PreprocessError::SampleRateTooLow(ecg.fs));
    }
    let duration = ecg.samples.len() as f64 / ecg.fs;
    if duration < 2.0 {
        return Err(PreprocessError::RecordTooShort {
            got: duration,
            need: 2.0,
        });
    }
    let fs = ecg.fs;
    let n = ecg.samples.len();

    // Band-pass as cascaded delay-compensated FIR stages: low-pass at
    // 15 Hz, then high-pass at 5 Hz by spectral inversion.
    let taps = (fs.round() as usize) | 1;
    let lp15 = sinc_lowpass(fs, 15.0, taps);
    let lp5 = sinc_lowpass(fs, 5.0, taps);
    let low = convolve_same(&ecg.samples, &lp15);
    let low5 = convolve_same(&low, &lp5);
    let bp: Vec<f64> = low.iter().zip(&low5).map(|(a, b)| a - b).collect();

    let deriv = derivative(&bp);
    let squared: Vec<f64> = deriv.iter().map(|v| v * v).collect();
    let mwi_window = ((0.150 * fs).round() as usize).max(1) | 1;
    let integrated = integrate(&squared, mwi_window);

    let refractory = (0.200 * fs).round() as usize;
    let refine_half = (0.075 * fs).round() as usize;

    // Candidate peaks: local maxima of the integrated signal that also
    // dominate a +-100 ms neighborhood. Noise ripple on the flanks of a
    // QRS lobe would otherwise fire early and push the true peak into
    // the refractory window.
    let dominance = (0.100 * fs).round() as usize;
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        if integrated[i] > integrated[i - 1] && integrated[i] >= integrated[i + 1] {
            let lo = i.saturating_sub(dominance);
            let hi = (i + dominance + 1).min(n);
            let neighborhood_max = integrated[lo..hi].iter().cloned().fold(f64::MIN, f64::max);
            if integrated[i] >= neighborhood_max {
                candidates.push((i, integrated[i]));
            }
        }
    }

    // Learning phase: thresholds from the first two seconds.
    let learn = ((2.0 * fs) as usize).min(n);
    let max_i = integrated[..learn].iter().cloned().fold(0.0, f64::max);
    let mean_i = integrated[..learn].iter().sum::<f64>() / learn as f64;
    let max_f = bp[..learn].iter().cloned().fold(0.0, f64::max);
    let mean_f = bp[..learn].iter().map(|v| v.abs()).sum::<f64>() / learn as f64;
    let mut ti = Thresholds {
        spk: 0.25 * max_i,
        npk: 0.5 * mean_i,
    };
    let mut tf = Thresholds {
        spk: 0.25 * max_f,
        npk: 0.5 * mean_f,
    };

    let bp_peak_near = |idx: usize| -> f64 {
        let lo = idx.saturating_sub(refine_half);
        let hi = (idx + refine_half + 1).min(n);
        bp[lo..hi].iter().cloned().fold(f64::MIN, f64::max)
    };

    let mut accepted: Vec<usize> = Vec::new();
    let mut rr_history: Vec<f64> = Vec::new();
    let push_accept = |accepted: &mut Vec<usize>, rr_history: &mut Vec<f64>, idx: usize| {
        if let Some(&prev) = accepted.last() {
            rr_history.push((idx - prev) as f64);
            if rr_history.len() > 8 {
                rr_history.remove(0);
            }
        }
        accepted.push(idx);
    };

    for ci in 0..candidates.len() {
        let (idx, pv) = candidates[ci];

        // Search-back: if the gap since the last beat exceeds 1.66x the
        // running RR average, re-examine skipped candidates at the lower
        // threshold pair.
        if let Some(&last) = accepted.last() {
            if !rr_history.is_empty() {
                let rr_avg = rr_history.iter().sum::<f64>() / rr_history.len() as f64;
                if (idx - last) as f64 > 1.66 * rr_avg {
                    let mut best: Option<(usize, f64)> = None;
                    for &(cj, cv) in candidates[..ci].iter().rev() {
                        if cj <= last + refractory {
                            break;
                        }
                        if cv > ti.thr2()
                            && bp_peak_near(cj) > tf.thr2()
                            && best.is_none_or(|(_, bv)| cv > bv)
                        {
                            best = Some((cj, cv));
                        }
                    }
                    if let Some((cj, cv)) = best {
                        ti.searchback(cv);
                        tf.searchback(bp_peak_near(cj));
                        push_accept(&mut accepted, &mut rr_history, cj);
                    }
                }
            }
        }

        let in_refractory = accepted
            .last()
            .is_some_and(|&last| idx <= last + refractory);
        if in_refractory {
            continue;
        }
        let bpv = bp_peak_near(idx);
        if pv > ti.thr1() && bpv > tf.thr1() {
            ti.signal(pv);
            tf.signal(bpv);
            push_accept(&mut accepted, &mut rr_history, idx);
        } else {
            ti.noise(pv);
            tf.noise(bpv);
        }
    }

    // Refine each detection to the band-passed local maximum, then
    // enforce strict ordering with the refractory gap.
    let mut times: Vec<f64> = Vec::with_capacity(accepted.len());
    for &idx in &accepted {
        let lo = idx.saturating_sub(refine_half);
        let hi = (idx + refine_half + 1).min(n);
        let (arg, _) =
            bp[lo..hi].iter().enumerate().fold(
                (0, f64::MIN),
                |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
            );
        times.push((lo + arg) as f64 / fs);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min_gap = refractory as f64 / fs;
    let mut out: Vec<f64> = Vec::with_capacity(times.len());
    for t in times {
        if out.last().is_none_or(|&prev| t - prev >= min_gap) {
            out.push(t);
        }
    }
    Ok(out)
}
