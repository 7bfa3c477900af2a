//! End-to-end CLI checks: artifact existence, byte-level determinism,
//! exit codes, and the WFDB-to-R-R path through the real subcommands.

use igbeat::harness::cli;
use igbeat::ingest;
use igbeat::preprocess::RRSeries;
use igbeat::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["igbeat".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cli::run(argv)
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("igbeat-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("read {}: {e}", p.display()))
}

#[test]
fn synth_is_deterministic_across_runs() {
    let dir = tmpdir("synth-det");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let code = run(&[
            "synth",
            "--subjects",
            "2",
            "--beats",
            "400",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    for f in ["s000.csv", "s001.csv", "manifest.csv", "config.txt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_produces_artifacts_and_is_deterministic() {
    let dir = tmpdir("train");
    let data = dir.join("data");
    assert_eq!(
        run(&[
            "synth",
            "--subjects",
            "3",
            "--beats",
            "300",
            "--seed",
            "3",
            "--out",
            data.to_str().unwrap(),
        ]),
        0
    );
    // Config file supplies the lengths; flags override the seed.
    let cfg = dir.join("exp.cfg");
    std::fs::write(
        &cfg,
        "train_len=80\ntest_len=80\nmax_epochs=2\npatience=1\nmodel_dim=6\nstate_dim=4\n",
    )
    .unwrap();
    let run_train = |out: &Path| {
        assert_eq!(
            run(&[
                "train",
                "--manifest",
                data.join("manifest.csv").to_str().unwrap(),
                "--variant",
                "gru",
                "--seed",
                "5",
                "--fold",
                "0",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
    };
    let (r1, r2) = (dir.join("run1"), dir.join("run2"));
    run_train(&r1);
    run_train(&r2);

    for f in [
        "checkpoint_s000.ckpt",
        "log_s000.csv",
        "fold_s000.csv",
        "config.txt",
        "summary.csv",
    ] {
        assert!(r1.join(f).exists(), "{f} missing");
    }
    // Full determinism under a fixed seed, byte for byte.
    for f in ["checkpoint_s000.ckpt", "log_s000.csv", "fold_s000.csv"] {
        assert_eq!(read(&r1.join(f)), read(&r2.join(f)), "{f} differs");
    }
    // Config echo reflects the merged file + flag values.
    let echo = read(&r1.join("config.txt"));
    assert!(echo.contains("train_len=80"));
    assert!(echo.contains("seed=5"));
    assert!(echo.contains("variant=gru"));

    // Leakage audit: the fold log's train list excludes the test subject.
    let log = read(&r1.join("log_s000.csv"));
    let header = log.lines().next().unwrap();
    assert!(header.contains("test=s000"));
    assert!(!header.split("train=").nth(1).unwrap().contains("s000"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn evaluate_and_report_round_trip() {
    let dir = tmpdir("evalrep");
    let data = dir.join("data");
    assert_eq!(
        run(&[
            "synth",
            "--subjects",
            "3",
            "--beats",
            "300",
            "--seed",
            "11",
            "--out",
            data.to_str().unwrap(),
        ]),
        0
    );
    let cfg = dir.join("exp.cfg");
    std::fs::write(
        &cfg,
        "train_len=80\ntest_len=80\nmax_epochs=2\npatience=1\nmodel_dim=6\nstate_dim=4\n",
    )
    .unwrap();
    let out = dir.join("run");
    assert_eq!(
        run(&[
            "train",
            "--manifest",
            data.join("manifest.csv").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--fold",
            "all",
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );

    // Evaluate the fold-0 checkpoint on its own test subject.
    let ev = dir.join("eval");
    assert_eq!(
        run(&[
            "evaluate",
            "--checkpoint",
            out.join("checkpoint_s000.ckpt").to_str().unwrap(),
            "--rr",
            data.join("s000.csv").to_str().unwrap(),
            "--test-len",
            "80",
            "--out",
            ev.to_str().unwrap(),
        ]),
        0
    );
    assert!(ev.join("s000_seg000_ks.csv").exists());
    assert!(ev.join("s000_seg000_ks.svg").exists());
    let summary = read(&ev.join("summary.csv"));
    assert!(summary.starts_with("subject_id,variant,segment_len,mean_ksd,sd_ksd,pass_fraction"));

    // Report over the three fold CSVs: subject rows + Overall Mean.
    let report = dir.join("summary_table.csv");
    assert_eq!(
        run(&[
            "report",
            "--folds",
            out.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ]),
        0
    );
    let table = read(&report);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "subject_id,gru,lstm,ssm-diag,ssm-selective");
    assert_eq!(lines.len(), 5); // 3 subjects + header + Overall Mean
    assert!(lines[4].starts_with("Overall Mean,"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn preprocess_wfdb_to_rr_csv() {
    let dir = tmpdir("wfdb");
    // Synthesize a 60 s ECG, encode as a format-212 WFDB record.
    let true_peaks: Vec<f64> = (0..70).map(|i| 1.0 + 0.8 * i as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ecg = synth::generate_ecg(&true_peaks, 128.0, 25.0, &mut rng);
    let gain = 200.0;
    let adu: Vec<i16> = ecg
        .samples
        .iter()
        .map(|&mv| ((mv * gain).round() as i32).clamp(-2048, 2047) as i16)
        .collect();
    std::fs::write(
        dir.join("rec7.hea"),
        format!("rec7 1 128 {}\nrec7.dat 212 200 0 mV\n", adu.len()),
    )
    .unwrap();
    std::fs::write(
        dir.join("rec7.dat"),
        ingest::encode_format212(&adu).unwrap(),
    )
    .unwrap();

    let out = dir.join("out");
    assert_eq!(
        run(&[
            "preprocess",
            "--input",
            dir.join("rec7.hea").to_str().unwrap(),
            "--format",
            "wfdb",
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    let series = RRSeries::from_csv(&read(&out.join("rec7_rr.csv"))).unwrap();
    // 70 beats at 0.8 s: expect nearly all intervals recovered at ~0.8.
    assert!(series.intervals().len() >= 65);
    let mean: f64 = series.intervals().iter().sum::<f64>() / series.intervals().len() as f64;
    assert!((mean - 0.8).abs() < 0.02, "mean RR {mean}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn preprocess_rpeaks_csv_input() {
    let dir = tmpdir("rpeaks");
    let mut text = String::from("time_s\n");
    for i in 0..40 {
        text.push_str(&format!("{:?}\n", 0.5 + 0.8 * i as f64));
    }
    // One long gap that must be flagged and interpolated.
    text.push_str(&format!("{:?}\n", 0.5 + 0.8 * 39.0 + 2.5));
    std::fs::write(dir.join("peaks.csv"), text).unwrap();
    let out = dir.join("out");
    assert_eq!(
        run(&[
            "preprocess",
            "--input",
            dir.join("peaks.csv").to_str().unwrap(),
            "--format",
            "rpeaks-csv",
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    let series = RRSeries::from_csv(&read(&out.join("peaks_rr.csv"))).unwrap();
    assert_eq!(series.intervals().len(), 40);
    assert_eq!(series.valid_mask().iter().filter(|v| !**v).count(), 1);
    assert!(series.intervals().iter().all(|&x| (0.3..=2.0).contains(&x)));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bad_usage_exits_nonzero() {
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["train", "--bogus-flag"]), 2);
    assert_eq!(run(&[]), 2);
    // Degenerate segment length is a runtime error, not a panic.
    assert_eq!(
        run(&[
            "evaluate",
            "--checkpoint",
            "/nonexistent.ckpt",
            "--rr",
            "/nonexistent.csv",
            "--test-len",
            "1",
            "--out",
            "/tmp/igbeat-y",
        ]),
        1
    );
    // Runtime failure (missing manifest) exits 1.
    assert_eq!(
        run(&[
            "train",
            "--manifest",
            "/nonexistent/m.csv",
            "--out",
            "/tmp/igbeat-x"
        ]),
        1
    );
}

#[test]
fn manifest_env_var_resolves_relative_paths() {
    let dir = tmpdir("envvar");
    let data = dir.join("data");
    assert_eq!(
        run(&[
            "synth",
            "--subjects",
            "3",
            "--beats",
            "200",
            "--seed",
            "2",
            "--out",
            data.to_str().unwrap(),
        ]),
        0
    );
    // Manifest in a different directory, paths relative to the data dir.
    let manifest = dir.join("manifest-elsewhere.csv");
    std::fs::write(
        &manifest,
        "subject_id,path\ns000,s000.csv\ns001,s001.csv\ns002,s002.csv\n",
    )
    .unwrap();
    std::env::set_var("IGBEAT_DATA_DIR", &data);
    let m = igbeat::harness::Manifest::read(&manifest).unwrap();
    std::env::remove_var("IGBEAT_DATA_DIR");
    assert_eq!(m.subjects.len(), 3);
    for (_, p) in &m.subjects {
        assert!(
            p.exists(),
            "{} should resolve into the data dir",
            p.display()
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}
