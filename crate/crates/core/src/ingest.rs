//! Data ingestion: a minimal WFDB reader (header plus format-212/16
//! signal files) for PhysioNet-style records, and CSV readers for
//! precomputed R-peak times and raw ECG samples.
//!
//! Format 212 packs two 12-bit two's-complement samples into three
//! bytes: sample A is `byte0 | ((byte1 & 0x0F) << 8)`, sample B is
//! `byte2 | ((byte1 & 0xF0) << 4)`, each sign-extended from bit 11.

use crate::preprocess::EcgRecord;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Header {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unsupported signal format {0} (supported: 212, 16)")]
    UnsupportedFormat(u16),
    #[error("signal file {path} truncated: expected {expected} samples, data holds {actual}")]
    Truncated {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Csv {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("sample {0} out of 12-bit range [-2048, 2047]")]
    OutOfRange(i32),
}

/// Per-signal description from the header's signal specification lines.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file: String,
    pub format: u16,
    /// ADC units per millivolt.
    pub gain: f64,
    /// ADC value corresponding to 0 mV.
    pub baseline: f64,
    pub units: Option<String>,
}

/// Parsed WFDB header: record line `name n_signals fs n_samples`, then
/// one signal line per channel: `file format gain baseline [units]`.
/// The gain token also accepts the `gain(baseline)/units` decoration.
#[derive(Debug, Clone, PartialEq)]
pub struct WfdbHeader {
    pub record: String,
    pub n_signals: usize,
    pub fs: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

pub fn parse_wfdb_header(text: &str, path: &str) -> Result<WfdbHeader, IngestError> {
    let err = |line: usize, msg: String| IngestError::Header {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));

    let (ln, record_line) = lines.next().ok_or_else(|| err(1, "empty header".into()))?;
    let toks: Vec<&str> = record_line.split_whitespace().collect();
    if toks.len() < 4 {
        return Err(err(
            ln + 1,
            format!("record line needs 'name n_signals fs n_samples', got '{record_line}'"),
        ));
    }
    let record = toks[0].to_string();
    if record.contains('/') {
        return Err(err(
            ln + 1,
            "multi-segment records are not supported".into(),
        ));
    }
    let n_signals: usize = toks[1]
        .parse()
        .map_err(|e| err(ln + 1, format!("bad signal count '{}': {e}", toks[1])))?;
    if n_signals < 1 {
        return Err(err(ln + 1, "record has no signals".into()));
    }
    let fs: f64 = toks[2]
        .parse()
        .map_err(|e| err(ln + 1, format!("bad sample rate '{}': {e}", toks[2])))?;
    if fs <= 0.0 {
        return Err(err(
            ln + 1,
            format!("sample rate must be positive, got {fs}"),
        ));
    }
    let n_samples: usize = toks[3]
        .parse()
        .map_err(|e| err(ln + 1, format!("bad sample count '{}': {e}", toks[3])))?;

    let mut signals = Vec::with_capacity(n_signals);
    for _ in 0..n_signals {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("expected {n_signals} signal lines")))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(err(
                ln + 1,
                format!("signal line needs 'file format gain [baseline]', got '{line}'"),
            ));
        }
        let file = toks[0].to_string();
        let format: u16 = toks[1]
            .parse()
            .map_err(|e| err(ln + 1, format!("bad format code '{}': {e}", toks[1])))?;
        if format != 212 && format != 16 {
            return Err(IngestError::UnsupportedFormat(format));
        }
        // Gain token: plain number or gain(baseline)/units.
        let gain_tok = toks[2];
        let (gain_str, paren_baseline, units) = {
            let (before_units, units) = match gain_tok.split_once('/') {
                Some((g, u)) => (g, Some(u.to_string())),
                None => (gain_tok, None),
            };
            match before_units.split_once('(') {
                Some((g, rest)) => {
                    let b = rest.trim_end_matches(')');
                    (g, Some(b.to_string()), units)
                }
                None => (before_units, None, units),
            }
        };
        let gain: f64 = gain_str
            .parse()
            .map_err(|e| err(ln + 1, format!("bad gain '{gain_str}': {e}")))?;
        if gain == 0.0 {
            return Err(err(ln + 1, "gain must be nonzero".into()));
        }
        let baseline: f64 = match paren_baseline {
            Some(b) => b
                .parse()
                .map_err(|e| err(ln + 1, format!("bad baseline '{b}': {e}")))?,
            None => match toks.get(3) {
                Some(t) => t
                    .parse()
                    .map_err(|e| err(ln + 1, format!("bad baseline '{t}': {e}")))?,
                None => 0.0,
            },
        };
        signals.push(SignalSpec {
            file,
            format,
            gain,
            baseline,
            units,
        });
    }
    Ok(WfdbHeader {
        record,
        n_signals,
        fs,
        n_samples,
        signals,
    })
}

fn sign_extend_12(v: u16) -> i16 {
    if v & 0x800 != 0 {
        (v | 0xF000) as i16
    } else {
        v as i16
    }
}

/// Decode `n` format-212 samples from packed bytes.
pub fn decode_format212(bytes: &[u8], n: usize) -> Result<Vec<i16>, IngestError> {
    let capacity = (bytes.len() / 3) * 2 + if bytes.len() % 3 >= 2 { 1 } else { 0 };
    if capacity < n {
        return Err(IngestError::Truncated {
            path: String::new(),
            expected: n,
            actual: capacity,
        });
    }
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let b0 = bytes[i] as u16;
        let b1 = bytes[i + 1] as u16;
        out.push(sign_extend_12(b0 | ((b1 & 0x0F) << 8)));
        if out.len() < n {
            let b2 = bytes[i + 2] as u16;
            out.push(sign_extend_12(b2 | ((b1 & 0xF0) << 4)));
        }
        i += 3;
    }
    Ok(out)
}

/// Pack samples into format-212 bytes (the codec's test-side inverse;
/// values must fit 12 bits).
pub fn encode_format212(samples: &[i16]) -> Result<Vec<u8>, IngestError> {
    for &s in samples {
        if !(-2048..=2047).contains(&s) {
            return Err(IngestError::OutOfRange(s as i32));
        }
    }
    let mut out = Vec::with_capacity(samples.len().div_ceil(2) * 3);
    for pair in samples.chunks(2) {
        let a = (pair[0] as u16) & 0x0FFF;
        let b = (*pair.get(1).unwrap_or(&0) as u16) & 0x0FFF;
        out.push((a & 0xFF) as u8);
        out.push(((a >> 8) as u8 & 0x0F) | ((b >> 8) as u8 & 0x0F) << 4);
        out.push((b & 0xFF) as u8);
    }
    Ok(out)
}

/// Decode little-endian 16-bit two's-complement samples (format 16).
pub fn decode_format16(bytes: &[u8], n: usize) -> Result<Vec<i16>, IngestError> {
    if bytes.len() / 2 < n {
        return Err(IngestError::Truncated {
            path: String::new(),
            expected: n,
            actual: bytes.len() / 2,
        });
    }
    Ok(bytes[..2 * n]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Read a WFDB record and return the first signal in physical units:
/// `(adu - baseline) / gain` millivolts.
pub fn read_wfdb(header_path: &Path) -> Result<EcgRecord, IngestError> {
    let header_text = std::fs::read_to_string(header_path).map_err(|source| IngestError::Io {
        path: header_path.display().to_string(),
        source,
    })?;
    let header = parse_wfdb_header(&header_text, &header_path.display().to_string())?;
    let spec = &header.signals[0];
    let dat_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&spec.file);
    let bytes = std::fs::read(&dat_path).map_err(|source| IngestError::Io {
        path: dat_path.display().to_string(),
        source,
    })?;

    // Samples interleave frame by frame across signals.
    let total = header.n_samples * header.n_signals;
    let raw = match spec.format {
        212 => decode_format212(&bytes, total),
        16 => decode_format16(&bytes, total),
        other => return Err(IngestError::UnsupportedFormat(other)),
    }
    .map_err(|e| match e {
        IngestError::Truncated {
            expected, actual, ..
        } => IngestError::Truncated {
            path: dat_path.display().to_string(),
            expected,
            actual,
        },
        other => other,
    })?;

    let samples: Vec<f64> = raw
        .iter()
        .step_by(header.n_signals)
        .map(|&adu| (adu as f64 - spec.baseline) / spec.gain)
        .collect();
    Ok(EcgRecord {
        samples,
        fs: header.fs,
        record_id: header.record,
    })
}

/// Read R-peak times (seconds) from CSV: either one time per line or
/// `beat_index,time_s` rows; a non-numeric header row is skipped. Times
/// must be strictly increasing.
pub fn read_rpeaks_csv(path: &Path) -> Result<Vec<f64>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let p = path.display().to_string();
    let mut times = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tok = line.split(',').next_back().unwrap_or(line).trim();
        match tok.parse::<f64>() {
            Ok(t) => {
                if let Some(&prev) = times.last() {
                    if t <= prev {
                        return Err(IngestError::Csv {
                            path: p,
                            line: ln + 1,
                            msg: format!("times not strictly increasing: {t} after {prev}"),
                        });
                    }
                }
                times.push(t);
            }
            Err(e) => {
                if ln == 0 {
                    continue; // header row
                }
                return Err(IngestError::Csv {
                    path: p,
                    line: ln + 1,
                    msg: format!("bad time '{tok}': {e}"),
                });
            }
        }
    }
    Ok(times)
}

/// Read raw ECG samples (mV) from a one-column CSV; the sample rate is
/// supplied by the caller. A non-numeric header row is skipped.
pub fn read_ecg_csv(path: &Path, fs: f64) -> Result<EcgRecord, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let p = path.display().to_string();
    let mut samples = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) => samples.push(v),
            Err(e) => {
                if ln == 0 {
                    continue;
                }
                return Err(IngestError::Csv {
                    path: p,
                    line: ln + 1,
                    msg: format!("bad sample '{line}': {e}"),
                });
            }
        }
    }
    let record_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ecg".to_string());
    Ok(EcgRecord {
        samples,
        fs,
        record_id,
    })
}
