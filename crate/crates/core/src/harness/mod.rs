//! Experiment orchestration: non-overlapping segmentation,
//! leave-one-subject-out cross-validation, NLL training with early
//! stopping, per-fold evaluation, and the aggregation that mirrors the
//! per-subject result tables.

pub mod cli;

use crate::autodiff::{accumulate_grads, adam_step, AdamConfig, AdamState};
use crate::backbone::{self, BackboneConfig, BackboneError, ModelParameters, Variant};
use crate::eval::{self, EvalError};
use crate::igdist;
use crate::preprocess::{PreprocessError, RRSeries};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Environment variable naming the default root for relative manifest
/// paths.
pub const DATA_DIR_ENV: &str = "IGBEAT_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("leave-one-subject-out needs at least 3 subjects, got {0}")]
    NotEnoughSubjects(usize),
    #[error("duplicate subject id '{0}' in manifest")]
    DuplicateSubject(String),
    #[error("no {0} segments; series shorter than the segment length?")]
    NoSegments(&'static str),
    #[error("training diverged at epoch {epoch}, segment {segment}: loss = {loss}")]
    Diverged {
        epoch: usize,
        segment: usize,
        loss: f64,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    ParseFile {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

// --- configuration -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub train_seq_len: usize,
    pub test_seq_len: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub state_dim: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::Gru,
            train_seq_len: 600,
            test_seq_len: 600,
            max_epochs: 2000,
            patience: 50,
            lr: 1e-3,
            seed: 0,
            model_dim: 64,
            state_dim: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.train_seq_len < 2 || self.test_seq_len < 2 {
            return Err(HarnessError::Config(
                "sequence lengths must be at least 2".into(),
            ));
        }
        if self.patience < 1 {
            return Err(HarnessError::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(HarnessError::Config("max_epochs must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(HarnessError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig::with_dims(self.variant, self.model_dim, self.state_dim)
    }

    /// Flat `key=value` rendering, the same format [`apply_key_values`]
    /// accepts; echoed into every output directory.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "train_len={}", self.train_seq_len);
        let _ = writeln!(s, "test_len={}", self.test_seq_len);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "model_dim={}", self.model_dim);
        let _ = writeln!(s, "state_dim={}", self.state_dim);
        s
    }

    /// Apply `key=value` lines ('#' comments and blanks ignored).
    pub fn apply_key_values(&mut self, text: &str, origin: &str) -> Result<(), HarnessError> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::ParseFile {
                    path: origin.to_string(),
                    line: ln + 1,
                    msg: format!("expected key=value, got '{line}'"),
                })?;
            let bad = |msg: String| HarnessError::ParseFile {
                path: origin.to_string(),
                line: ln + 1,
                msg,
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "variant" => self.variant = v.parse().map_err(bad)?,
                "train_len" => self.train_seq_len = v.parse().map_err(|e| bad(format!("{e}")))?,
                "test_len" => self.test_seq_len = v.parse().map_err(|e| bad(format!("{e}")))?,
                "max_epochs" => self.max_epochs = v.parse().map_err(|e| bad(format!("{e}")))?,
                "patience" => self.patience = v.parse().map_err(|e| bad(format!("{e}")))?,
                "lr" => self.lr = v.parse().map_err(|e| bad(format!("{e}")))?,
                "seed" => self.seed = v.parse().map_err(|e| bad(format!("{e}")))?,
                "model_dim" => self.model_dim = v.parse().map_err(|e| bad(format!("{e}")))?,
                "state_dim" => self.state_dim = v.parse().map_err(|e| bad(format!("{e}")))?,
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        Ok(())
    }
}

// --- manifest -----------------------------------------------------------

/// Subject-to-record mapping: CSV rows `subject_id,path`, with relative
/// paths resolved against `IGBEAT_DATA_DIR` when set, else against the
/// manifest's own directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub subjects: Vec<(String, PathBuf)>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let root = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| path.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."));
        let mut subjects = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line == "subject_id,path" {
                continue;
            }
            let (id, rel) = line
                .split_once(',')
                .ok_or_else(|| HarnessError::ParseFile {
                    path: path.display().to_string(),
                    line: ln + 1,
                    msg: format!("expected 'subject_id,path', got '{line}'"),
                })?;
            let id = id.trim().to_string();
            let p = PathBuf::from(rel.trim());
            let abs = if p.is_absolute() { p } else { root.join(p) };
            if subjects.iter().any(|(s, _)| *s == id) {
                return Err(HarnessError::DuplicateSubject(id));
            }
            subjects.push((id, abs));
        }
        subjects.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Manifest { subjects })
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn path_of(&self, subject: &str) -> Option<&Path> {
        self.subjects
            .iter()
            .find(|(s, _)| s == subject)
            .map(|(_, p)| p.as_path())
    }
}

// --- segmentation and folds ----------------------------------------------

/// Consecutive non-overlapping windows of exactly `len` intervals; the
/// trailing remainder is discarded. A series shorter than `len` yields
/// an empty list.
pub fn segment(intervals: &[f64], len: usize) -> Vec<Vec<f64>> {
    assert!(len >= 2, "segment length must be at least 2, got {len}");
    intervals.chunks_exact(len).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: String,
    pub test: String,
}

/// One fold per subject as test; the validation subject is the next one
/// in sorted order, the rest train. Test-subject data never reaches
/// training or tuning.
pub fn loso_folds(subject_ids: &[String]) -> Result<Vec<Fold>, HarnessError> {
    let n = subject_ids.len();
    if n < 3 {
        return Err(HarnessError::NotEnoughSubjects(n));
    }
    let mut sorted = subject_ids.to_vec();
    sorted.sort();
    let mut folds = Vec::with_capacity(n);
    for i in 0..n {
        let test = sorted[i].clone();
        let val = sorted[(i + 1) % n].clone();
        let train: Vec<String> = sorted
            .iter()
            .filter(|s| **s != test && **s != val)
            .cloned()
            .collect();
        folds.push(Fold {
            index: i,
            train,
            val,
            test,
        });
    }
    Ok(folds)
}

/// Segment sets for one fold, ready for [`train`] and [`evaluate`].
#[derive(Debug, Clone)]
pub struct FoldData {
    pub train_segments: Vec<Vec<f64>>,
    pub val_segments: Vec<Vec<f64>>,
    pub test_segments: Vec<Vec<f64>>,
}

/// Load the fold's series from the manifest and segment them: training
/// and validation at the training length, test at the test length.
pub fn load_fold_data(
    manifest: &Manifest,
    fold: &Fold,
    config: &ExperimentConfig,
) -> Result<FoldData, HarnessError> {
    let read_series = |subject: &str| -> Result<RRSeries, HarnessError> {
        let path = manifest.path_of(subject).ok_or_else(|| {
            HarnessError::Config(format!("subject '{subject}' missing from manifest"))
        })?;
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(RRSeries::from_csv(&text)?)
    };
    let mut train_segments = Vec::new();
    for s in &fold.train {
        train_segments.extend(segment(read_series(s)?.intervals(), config.train_seq_len));
    }
    let val_segments = segment(read_series(&fold.val)?.intervals(), config.train_seq_len);
    let test_segments = segment(read_series(&fold.test)?.intervals(), config.test_seq_len);
    if train_segments.is_empty() {
        return Err(HarnessError::NoSegments("training"));
    }
    if val_segments.is_empty() {
        return Err(HarnessError::NoSegments("validation"));
    }
    if test_segments.is_empty() {
        return Err(HarnessError::NoSegments("test"));
    }
    Ok(FoldData {
        train_segments,
        val_segments,
        test_segments,
    })
}

// --- training -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll_per_beat: f64,
    pub val_nll_per_beat: f64,
    pub improved: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub log: Vec<EpochStats>,
    pub best_val_nll: f64,
    pub epochs_trained: usize,
}

fn mean_nll_per_beat(params: &ModelParameters, segments: &[Vec<f64>]) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    let mut steps = 0usize;
    for seg in segments {
        let traj = backbone::predict_trajectory(params, seg)?;
        total += igdist::nll_total(&traj).map_err(EvalError::from)?;
        steps += traj.len();
    }
    Ok(total / steps as f64)
}

/// Minimize the summed NLL over the training segments with Adam, one
/// gradient step per segment, segments reshuffled every epoch. After
/// each epoch the mean per-beat validation NLL is evaluated; training
/// stops when `patience` epochs pass without improvement (or at the
/// epoch cap) and the best-validation parameters are restored.
pub fn train(data: &FoldData, config: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if data.train_segments.is_empty() {
        return Err(HarnessError::NoSegments("training"));
    }
    if data.val_segments.is_empty() {
        return Err(HarnessError::NoSegments("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParameters::init(config.backbone(), &mut rng)?;
    let mut adam = AdamState::new(&params.params);
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };

    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut log = Vec::new();

    let mut order: Vec<usize> = (0..data.train_segments.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        let mut train_steps = 0usize;
        for &si in &order {
            let seg = &data.train_segments[si];
            let mut g = crate::autodiff::Graph::new();
            let binding = params.bind(&mut g);
            let out = backbone::forward(&mut g, &params, &binding, seg, true)?;
            let loss = backbone::nll_loss(&mut g, &out, &seg[1..]);
            let loss_val = g.scalar(loss);
            if !loss_val.is_finite() {
                return Err(HarnessError::Diverged {
                    epoch,
                    segment: si,
                    loss: loss_val,
                });
            }
            g.backward(loss).expect("fresh graph, scalar loss");
            accumulate_grads(&mut params.params, &g, &binding);
            adam_step(&mut params.params, &mut adam, &adam_cfg)
                .expect("gradients populated by backward");
            train_total += loss_val;
            train_steps += seg.len() - 1;
        }

        let val_nll = mean_nll_per_beat(&params, &data.val_segments)?;
        let improved = val_nll < best_val;
        if improved {
            best_val = val_nll;
            best_params = params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        log.push(EpochStats {
            epoch,
            train_nll_per_beat: train_total / train_steps as f64,
            val_nll_per_beat: val_nll,
            improved,
        });
        if bad_epochs >= config.patience {
            break;
        }
    }

    let epochs_trained = log.len();
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_val_nll: best_val,
        epochs_trained,
    })
}

/// Training log CSV. The comment line records the fold split so leakage
/// is auditable from the artifact alone.
pub fn training_log_csv(outcome: &TrainOutcome, fold: &Fold) -> String {
    let mut s = format!(
        "# fold={} test={} val={} train={}\n",
        fold.index,
        fold.test,
        fold.val,
        fold.train.join(";")
    );
    s.push_str("epoch,train_nll_per_beat,val_nll_per_beat,improved\n");
    for e in &outcome.log {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{}",
            e.epoch, e.train_nll_per_beat, e.val_nll_per_beat, e.improved
        );
    }
    s
}

// --- evaluation -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub test_subject: String,
    pub variant: Variant,
    pub segment_ksd: Vec<f64>,
    pub mean_ksd: f64,
    /// Sample standard deviation; 0 for a single segment.
    pub sd_ksd: f64,
    pub bound: f64,
    pub best_val_nll: f64,
    pub epochs_trained: usize,
}

/// Per segment: forward, rescale, KS distance; then per-subject mean and
/// SD of the KSD.
pub fn evaluate(
    params: &ModelParameters,
    test_segments: &[Vec<f64>],
    test_subject: &str,
    best_val_nll: f64,
    epochs_trained: usize,
) -> Result<FoldResult, HarnessError> {
    if test_segments.is_empty() {
        return Err(HarnessError::NoSegments("test"));
    }
    let mut segment_ksd = Vec::with_capacity(test_segments.len());
    let mut bound = 0.0;
    for seg in test_segments {
        let traj = backbone::predict_trajectory(params, seg)?;
        let u = eval::rescale(&traj)?;
        let report = eval::ks_distance(&u)?;
        bound = report.bound;
        segment_ksd.push(report.ksd);
    }
    let n = segment_ksd.len() as f64;
    let mean_ksd = segment_ksd.iter().sum::<f64>() / n;
    let sd_ksd = if segment_ksd.len() < 2 {
        0.0
    } else {
        (segment_ksd
            .iter()
            .map(|k| (k - mean_ksd) * (k - mean_ksd))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    };
    Ok(FoldResult {
        test_subject: test_subject.to_string(),
        variant: params.config.variant,
        segment_ksd,
        mean_ksd,
        sd_ksd,
        bound,
        best_val_nll,
        epochs_trained,
    })
}

/// Fold CSV: `subject_id,variant,segment_index,ksd,bound,pass`.
pub fn fold_result_csv(result: &FoldResult) -> String {
    let mut s = String::from("subject_id,variant,segment_index,ksd,bound,pass\n");
    for (i, &k) in result.segment_ksd.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?},{}",
            result.test_subject,
            result.variant,
            i,
            k,
            result.bound,
            k < result.bound
        );
    }
    s
}

// --- report aggregation -------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRow {
    pub subject: String,
    pub variant: String,
    pub segment_index: usize,
    pub ksd: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn parse_fold_csv(text: &str, origin: &str) -> Result<Vec<FoldRow>, HarnessError> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("subject_id,") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(HarnessError::ParseFile {
                path: origin.to_string(),
                line: ln + 1,
                msg: format!("expected 6 columns, got {}", cols.len()),
            });
        }
        let num = |s: &str| -> Result<f64, HarnessError> {
            s.parse().map_err(|e| HarnessError::ParseFile {
                path: origin.to_string(),
                line: ln + 1,
                msg: format!("bad number '{s}': {e}"),
            })
        };
        rows.push(FoldRow {
            subject: cols[0].to_string(),
            variant: cols[1].to_string(),
            segment_index: num(cols[2])? as usize,
            ksd: num(cols[3])?,
            bound: num(cols[4])?,
            pass: cols[5] == "true",
        });
    }
    Ok(rows)
}

const VARIANT_COLUMNS: [&str; 4] = ["gru", "lstm", "ssm-diag", "ssm-selective"];

/// Summary CSV mirroring the per-subject result tables: one row per
/// subject with `mean [sd]` of the KSD per variant, and a final
/// `Overall Mean` row holding the across-subject mean of the
/// subject-level mean KSD.
pub fn summary_table(rows: &[FoldRow]) -> String {
    let mut per_cell: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        per_cell
            .entry((r.subject.clone(), r.variant.clone()))
            .or_default()
            .push(r.ksd);
    }
    let subjects: Vec<String> = {
        let mut s: Vec<String> = per_cell.keys().map(|(s, _)| s.clone()).collect();
        s.sort();
        s.dedup();
        s
    };

    let mut out = String::from("subject_id");
    for v in VARIANT_COLUMNS {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');

    let mut subject_means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for subject in &subjects {
        let _ = write!(out, "{subject}");
        for v in VARIANT_COLUMNS {
            match per_cell.get(&(subject.clone(), v.to_string())) {
                Some(ks) => {
                    let n = ks.len() as f64;
                    let mean = ks.iter().sum::<f64>() / n;
                    let sd = if ks.len() < 2 {
                        0.0
                    } else {
                        (ks.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / (n - 1.0)).sqrt()
                    };
                    let _ = write!(out, ",{mean:.3} [{sd:.3}]");
                    subject_means.entry(v.to_string()).or_default().push(mean);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }

    out.push_str("Overall Mean");
    for v in VARIANT_COLUMNS {
        match subject_means.get(v) {
            Some(means) if !means.is_empty() => {
                let overall = means.iter().sum::<f64>() / means.len() as f64;
                let _ = write!(out, ",{overall:.4}");
            }
            _ => out.push(','),
        }
    }
    out.push('\n');
    out
}

/// Per-run summary CSV:
/// `subject_id,variant,segment_len,mean_ksd,sd_ksd,pass_fraction`.
pub fn run_summary_csv(results: &[FoldResult], test_len: usize) -> String {
    let mut s = String::from("subject_id,variant,segment_len,mean_ksd,sd_ksd,pass_fraction\n");
    for r in results {
        let pass_fraction = r.segment_ksd.iter().filter(|&&k| k < r.bound).count() as f64
            / r.segment_ksd.len() as f64;
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.4}",
            r.test_subject, r.variant, test_len, r.mean_ksd, r.sd_ksd, pass_fraction
        );
    }
    s
}
