//! Command-line interface: `preprocess`, `synth`, `train`, `evaluate`
//! and `report` subcommands over the library pipeline.

use super::{
    evaluate, fold_result_csv, load_fold_data, loso_folds, run_summary_csv, segment, summary_table,
    train, ExperimentConfig, Fold, HarnessError, Manifest,
};
use crate::backbone::{self, Variant};
use crate::eval;
use crate::ingest;
use crate::preprocess::{self, RRSeries};
use crate::synth::{self, ParamTrajectory};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "igbeat",
    about = "Inverse Gaussian point-process heartbeat modeling with recurrent backbones",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    /// WFDB header (+ companion signal file)
    Wfdb,
    /// One ECG sample (mV) per line; requires --fs
    EcgCsv,
    /// Precomputed R-peak times in seconds
    RpeaksCsv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    Constant,
    Sinusoidal,
    RegimeSwitch,
}

#[derive(Subcommand)]
enum Command {
    /// ECG or peak input -> clean R-R interval CSV
    Preprocess {
        /// Input file (WFDB .hea, ECG CSV, or R-peak CSV)
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "wfdb")]
        format: InputFormat,
        /// Sample rate for --format ecg-csv
        #[arg(long, default_value_t = 128.0)]
        fs: f64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic R-R datasets with known ground truth
    Synth {
        #[arg(long, default_value_t = 1)]
        subjects: usize,
        #[arg(long, default_value_t = 3000)]
        beats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "sinusoidal")]
        kind: SynthKind,
        #[arg(long, default_value_t = 0.9)]
        base_mu: f64,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        /// Modulation amplitude (sinusoidal / regime-switch), seconds
        #[arg(long, default_value_t = 0.08)]
        amplitude: f64,
        /// Modulation period (sinusoidal), seconds
        #[arg(long, default_value_t = 8.0)]
        period: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold or a full leave-one-subject-out sweep
    Train {
        /// Manifest CSV: subject_id,path (relative paths resolve against
        /// IGBEAT_DATA_DIR when set)
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        train_len: Option<usize>,
        #[arg(long)]
        test_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Fold selector: a fold index or "all"
        #[arg(long, default_value = "all")]
        fold: String,
        /// key=value config file applied before the flags above
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an R-R CSV: KS reports per segment
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// R-R CSV in the preprocess output schema
        #[arg(long)]
        rr: PathBuf,
        #[arg(long, default_value_t = 600)]
        test_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate fold CSVs into the per-subject summary table
    Report {
        /// Directory containing fold_*.csv files
        #[arg(long)]
        folds: PathBuf,
        /// Output summary CSV path
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run the CLI on explicit argv (first element is the program name).
/// Returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage text; --help/--version exit 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Preprocess {
            input,
            format,
            fs,
            out,
        } => cmd_preprocess(&input, format, fs, &out),
        Command::Synth {
            subjects,
            beats,
            seed,
            kind,
            base_mu,
            sigma,
            amplitude,
            period,
            out,
        } => cmd_synth(
            subjects, beats, seed, kind, base_mu, sigma, amplitude, period, &out,
        ),
        Command::Train {
            manifest,
            variant,
            train_len,
            test_len,
            seed,
            max_epochs,
            patience,
            lr,
            fold,
            config,
            out,
        } => {
            let mut cfg = ExperimentConfig::default();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path)?;
                cfg.apply_key_values(&text, &path.display().to_string())?;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(v) = train_len {
                cfg.train_seq_len = v;
            }
            if let Some(v) = test_len {
                cfg.test_seq_len = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = max_epochs {
                cfg.max_epochs = v;
            }
            if let Some(v) = patience {
                cfg.patience = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            cmd_train(&manifest, cfg, &fold, &out)
        }
        Command::Evaluate {
            checkpoint,
            rr,
            test_len,
            out,
        } => cmd_evaluate(&checkpoint, &rr, test_len, &out),
        Command::Report { folds, out } => cmd_report(&folds, &out),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), std::io::Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)
}

fn cmd_preprocess(
    input: &Path,
    format: InputFormat,
    fs: f64,
    out: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let (record_id, series): (String, RRSeries) = match format {
        InputFormat::Wfdb => {
            let ecg = ingest::read_wfdb(input)?;
            let peaks = preprocess::detect_rpeaks(&ecg)?;
            (ecg.record_id.clone(), preprocess::clean_intervals(&peaks)?)
        }
        InputFormat::EcgCsv => {
            let ecg = ingest::read_ecg_csv(input, fs)?;
            let peaks = preprocess::detect_rpeaks(&ecg)?;
            (ecg.record_id.clone(), preprocess::clean_intervals(&peaks)?)
        }
        InputFormat::RpeaksCsv => {
            let peaks = ingest::read_rpeaks_csv(input)?;
            let id = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "record".into());
            (id, preprocess::clean_intervals(&peaks)?)
        }
    };
    let path = out.join(format!("{record_id}_rr.csv"));
    write_file(&path, &series.to_csv())?;
    let interpolated = series.valid_mask().iter().filter(|v| !**v).count();
    println!(
        "{}: {} intervals ({} interpolated) -> {}",
        record_id,
        series.intervals().len(),
        interpolated,
        path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    subjects: usize,
    beats: usize,
    seed: u64,
    kind: SynthKind,
    base_mu: f64,
    sigma: f64,
    amplitude: f64,
    period: f64,
    out: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let traj = match kind {
        SynthKind::Constant => ParamTrajectory::Constant { mu: base_mu, sigma },
        SynthKind::Sinusoidal => ParamTrajectory::Sinusoidal {
            base_mu,
            sigma,
            amplitude,
            period_s: period,
        },
        SynthKind::RegimeSwitch => {
            // Alternate between low and high mean every beats/10 beats.
            let block = (beats / 10).max(50);
            ParamTrajectory::RegimeSwitch {
                regimes: (0..10)
                    .map(|i| {
                        let mu = if i % 2 == 0 {
                            base_mu - amplitude
                        } else {
                            base_mu + amplitude
                        };
                        (block, mu, sigma)
                    })
                    .collect(),
            }
        }
    };
    std::fs::create_dir_all(out)?;
    let mut manifest = String::from("subject_id,path\n");
    for s in 0..subjects {
        let id = format!("s{s:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let (series, _) = synth::generate_rr(&traj, beats, &mut rng)?;
        let file = format!("{id}.csv");
        write_file(&out.join(&file), &series.to_csv())?;
        let _ = writeln!(manifest, "{id},{file}");
    }
    write_file(&out.join("manifest.csv"), &manifest)?;
    let mut echo = String::new();
    let _ = writeln!(echo, "subjects={subjects}");
    let _ = writeln!(echo, "beats={beats}");
    let _ = writeln!(echo, "seed={seed}");
    let _ = writeln!(
        echo,
        "kind={}",
        match kind {
            SynthKind::Constant => "constant",
            SynthKind::Sinusoidal => "sinusoidal",
            SynthKind::RegimeSwitch => "regime-switch",
        }
    );
    let _ = writeln!(echo, "base_mu={base_mu:?}");
    let _ = writeln!(echo, "sigma={sigma:?}");
    let _ = writeln!(echo, "amplitude={amplitude:?}");
    let _ = writeln!(echo, "period={period:?}");
    write_file(&out.join("config.txt"), &echo)?;
    println!(
        "wrote {subjects} subjects x {beats} beats to {}",
        out.display()
    );
    Ok(())
}

fn cmd_train(
    manifest_path: &Path,
    config: ExperimentConfig,
    fold_sel: &str,
    out: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    config.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    let folds = loso_folds(&manifest.subject_ids())?;
    let selected: Vec<Fold> = if fold_sel == "all" {
        folds
    } else {
        let idx: usize = fold_sel.parse().map_err(|_| {
            HarnessError::Config(format!(
                "--fold expects an index or 'all', got '{fold_sel}'"
            ))
        })?;
        let f = folds
            .into_iter()
            .find(|f| f.index == idx)
            .ok_or_else(|| HarnessError::Config(format!("fold index {idx} out of range")))?;
        vec![f]
    };

    std::fs::create_dir_all(out)?;
    write_file(&out.join("config.txt"), &config.to_key_values())?;

    let mut results = Vec::new();
    for fold in &selected {
        let data = load_fold_data(&manifest, fold, &config)?;
        let outcome = train(&data, &config)?;
        let result = evaluate(
            &outcome.params,
            &data.test_segments,
            &fold.test,
            outcome.best_val_nll,
            outcome.epochs_trained,
        )?;
        backbone::save_checkpoint(
            &outcome.params,
            &out.join(format!("checkpoint_{}.ckpt", fold.test)),
        )?;
        write_file(
            &out.join(format!("log_{}.csv", fold.test)),
            &super::training_log_csv(&outcome, fold),
        )?;
        write_file(
            &out.join(format!("fold_{}.csv", fold.test)),
            &fold_result_csv(&result),
        )?;
        println!(
            "fold {}: test={} val={} epochs={} best_val_nll={:.4} mean_ksd={:.4} (bound {:.3})",
            fold.index,
            fold.test,
            fold.val,
            outcome.epochs_trained,
            outcome.best_val_nll,
            result.mean_ksd,
            result.bound
        );
        results.push(result);
    }
    write_file(
        &out.join("summary.csv"),
        &run_summary_csv(&results, config.test_seq_len),
    )?;
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    rr: &Path,
    test_len: usize,
    out: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    if test_len < 2 {
        return Err(
            HarnessError::Config(format!("--test-len must be at least 2, got {test_len}")).into(),
        );
    }
    let params = backbone::load_checkpoint(checkpoint)?;
    let text = std::fs::read_to_string(rr)?;
    let series = RRSeries::from_csv(&text)?;
    let segments = segment(series.intervals(), test_len);
    if segments.is_empty() {
        eprintln!(
            "warning: series has {} intervals, shorter than the segment length {test_len}; nothing to evaluate",
            series.intervals().len()
        );
        return Ok(());
    }
    let subject = rr
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "record".into());

    std::fs::create_dir_all(out)?;
    let mut echo = String::new();
    let _ = writeln!(echo, "checkpoint={}", checkpoint.display());
    let _ = writeln!(echo, "rr={}", rr.display());
    let _ = writeln!(echo, "test_len={test_len}");
    let _ = writeln!(echo, "variant={}", params.config.variant);
    write_file(&out.join("config.txt"), &echo)?;

    for (i, seg) in segments.iter().enumerate() {
        let traj = backbone::predict_trajectory(&params, seg)?;
        let u = eval::rescale(&traj)?;
        let report = eval::ks_distance(&u)?;
        write_file(
            &out.join(format!("{subject}_seg{i:03}_ks.csv")),
            &eval::ks_plot_csv(&report),
        )?;
        write_file(
            &out.join(format!("{subject}_seg{i:03}_ks.svg")),
            &eval::ks_plot_svg(&report),
        )?;
        println!(
            "segment {i}: ksd={:.4} bound={:.4} {}",
            report.ksd,
            report.bound,
            if report.pass { "pass" } else { "fail" }
        );
    }
    let result = evaluate(&params, &segments, &subject, f64::NAN, 0)?;
    write_file(
        &out.join("summary.csv"),
        &run_summary_csv(&[result], test_len),
    )?;
    Ok(())
}

fn cmd_report(folds_dir: &Path, out: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let mut rows = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(folds_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("fold_"))
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(format!("no fold_*.csv files in {}", folds_dir.display()).into());
    }
    for path in &entries {
        let text = std::fs::read_to_string(path)?;
        rows.extend(super::parse_fold_csv(&text, &path.display().to_string())?);
    }
    let table = summary_table(&rows);
    write_file(out, &table)?;
    println!("{table}");
    Ok(())
}
