use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hsvseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsvseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = hsvseg(args);
    assert_eq!(
        code(&o),
        0,
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Small synthetic dataset plus a tiny promptable checkpoint.
fn setup(dir: &Path, noise: &str) -> (PathBuf, PathBuf) {
    let out = dir.join("out");
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--frames-per-modality",
        "10",
        "--height",
        "64",
        "--width",
        "64",
        "--noise",
        noise,
    ]);
    let ckpt = dir.join("base.ckpt");
    ok(&[
        "init-foundation",
        "--output",
        s(&ckpt),
        "--embed-dim",
        "8",
        "--patch-resolution",
        "16",
        "--seed",
        "3",
    ]);
    (out, ckpt)
}

#[test]
fn dry_runs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = ok(&[
        "--dry-run",
        "synth",
        "--out",
        s(&out),
        "--frames-per-modality",
        "3",
    ]);
    assert!(text.contains("Water: 3 frame(s)"), "{text}");
    assert!(!out.exists());

    let (out, ckpt) = setup(dir.path(), "0");
    let before = files_under(dir.path());
    let text = ok(&[
        "experiment",
        "zero_shot",
        "--dry-run",
        "--out",
        s(&out),
        "--foundation-checkpoint",
        s(&ckpt),
        "--cell-size",
        "32",
    ]);
    assert!(
        text.contains("evaluate on test split of: Nitrogen, FC-72, Water"),
        "{text}"
    );
    ok(&[
        "train",
        "--dry-run",
        "--out",
        s(&out),
        "--backend",
        "unet",
        "--patch-resolution",
        "16",
        "--unet-depth",
        "2",
    ]);
    ok(&[
        "eval",
        "--dry-run",
        "--out",
        s(&out),
        "--backend",
        "threshold",
    ]);
    ok(&[
        "--dry-run",
        "init-foundation",
        "--output",
        s(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(files_under(dir.path()), before);
}

#[test]
fn threshold_eval_recovers_noise_free_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = setup(dir.path(), "0");
    let text = ok(&[
        "eval",
        "--out",
        s(&out),
        "--backend",
        "threshold",
        "--cell-size",
        "50",
        "--patch-resolution",
        "128",
    ]);
    assert!(text.contains("Argon"), "{text}");
    let csv = fs::read_to_string(out.join("eval/threshold/argon_frames.csv")).unwrap();
    let mut reader = csv.lines();
    let header: Vec<&str> = reader.next().unwrap().split(',').collect();
    let iou = header.iter().position(|&h| h == "iou").unwrap();
    for line in reader {
        assert_eq!(
            line.split(',').nth(iou).unwrap().parse::<f64>().unwrap(),
            1.0,
            "{line}"
        );
    }
    let pooled = fs::read_to_string(out.join("eval/threshold/argon_pooled.csv")).unwrap();
    let rows: Vec<&str> = pooled.lines().collect();
    assert_eq!(rows.len(), 2);
    let fp = rows[0].split(',').position(|h| h == "fp").unwrap();
    assert_eq!(rows[1].split(',').nth(fp), Some("0"));
}

#[test]
fn experiment_report_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (out, ckpt) = setup(dir.path(), "0.02");
    let args = [
        "experiment",
        "unet_comparison",
        "--out",
        s(&out),
        "--foundation-checkpoint",
        s(&ckpt),
        "--cell-size",
        "32",
    ];
    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        "epochs = 1\nbatch_size = 16\nlr = 1e-3\nunet-depth = 2\nunet-width = 4\n",
    )
    .unwrap();
    let text = ok(&[&args[..], &["--config", s(&config)]].concat());
    assert!(text.contains("Fine-tuned"), "{text}");
    for f in [
        "eval/comparison.csv",
        "eval/water.csv",
        "reports/results_table.txt",
        "reports/boxplot_f1.svg",
        "run.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let table = fs::read(out.join("reports/results_table.txt")).unwrap();
    ok(&["report", "--out", s(&out)]);
    assert_eq!(
        fs::read(out.join("reports/results_table.txt")).unwrap(),
        table
    );

    let replay = dir.path().join("replay");
    ok(&[
        "experiment",
        "--from-run",
        s(&out.join("run.json")),
        "--out",
        s(&replay),
    ]);
    assert_eq!(
        fs::read(out.join("eval/comparison.csv")).unwrap(),
        fs::read(replay.join("eval/comparison.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = setup(dir.path(), "0");
    let config = dir.path().join("c.cfg");
    fs::write(
        &config,
        "epochs = 3\nbackend = unet\npatch_resolution = 16\nunet_depth = 2\n",
    )
    .unwrap();
    let from_file = ok(&[
        "train",
        "--dry-run",
        "--out",
        s(&out),
        "--config",
        s(&config),
    ]);
    assert!(
        from_file.contains("3 epoch(s)") && from_file.contains("train unet"),
        "{from_file}"
    );
    let from_flag = ok(&[
        "train",
        "--dry-run",
        "--out",
        s(&out),
        "--config",
        s(&config),
        "--epochs",
        "2",
    ]);
    assert!(from_flag.contains("2 epoch(s)"), "{from_flag}");
    let default = ok(&[
        "train",
        "--dry-run",
        "--out",
        s(&out),
        "--backend",
        "unet",
        "--patch-resolution",
        "16",
        "--unet-depth",
        "2",
    ]);
    assert!(default.contains("20 epoch(s)"), "{default}");
}

#[test]
fn two_stage_inference_writes_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (out, ckpt) = setup(dir.path(), "0.02");
    ok(&[
        "train",
        "--out",
        s(&out),
        "--backend",
        "unet",
        "--patch-resolution",
        "16",
        "--unet-depth",
        "2",
        "--unet-width",
        "4",
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--cell-size",
        "32",
        "--modality",
        "argon",
    ]);
    let unet = out.join("checkpoints/unet/model.ckpt");
    assert!(unet.is_file());
    ok(&[
        "infer",
        "--out",
        s(&out),
        "--input",
        s(&out.join("manifests/argon/frames")),
        "--checkpoint",
        s(&ckpt),
        "--cell-size",
        "32",
        "--proposal-backend",
        "unet",
        "--proposal-checkpoint",
        s(&unet),
    ]);
    assert_eq!(files_under(&out.join("eval/masks")).len(), 10);
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hsvseg(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&hsvseg(&["--help"])), 0);
    let missing = dir.path().join("nothing");
    assert_eq!(
        code(&hsvseg(&[
            "eval",
            "--out",
            s(&missing),
            "--backend",
            "threshold"
        ])),
        1
    );
    assert_eq!(code(&hsvseg(&["report", "--out", s(&missing)])), 1);

    let (out, _) = setup(dir.path(), "0");
    let absent = s(&dir.path().join("absent.ckpt")).to_string();
    let o = hsvseg(&[
        "experiment",
        "zero_shot",
        "--out",
        s(&out),
        "--foundation-checkpoint",
        &absent,
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));
    assert!(!out.join("checkpoints").exists());

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "colour = blue\n").unwrap();
    assert_eq!(
        code(&hsvseg(&["report", "--config", s(&bad), "--out", s(&out)])),
        1
    );

    fs::write(out.join(".lock"), "1").unwrap();
    assert_eq!(
        code(&hsvseg(&[
            "eval",
            "--out",
            s(&out),
            "--backend",
            "threshold"
        ])),
        2
    );
}
