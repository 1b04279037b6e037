use std::path::Path;
use std::process::{Command, Output};

use audfront::signal::write_wav;
use audfront::train::{toy_classification, write_labels, Manifest, ManifestItem};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_audfront"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(&["spectrogram", "--in", "x.wav", "--out", "y.csv", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "spectrogram",
        "--in",
        p(&dir.path().join("missing.wav")),
        "--out",
        p(&dir.path().join("s.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn spectrogram_of_one_second() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("h.wav");
    let csv = dir.path().join("s.csv");
    let pgm = dir.path().join("s.pgm");
    assert!(run(&[
        "synth",
        "--kind",
        "harmonic",
        "--f0",
        "200",
        "--out",
        p(&wav)
    ])
    .status
    .success());
    let out = run(&[
        "spectrogram",
        "--in",
        p(&wav),
        "--out",
        p(&csv),
        "--pgm",
        p(&pgm),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 201);
    assert!(lines.iter().all(|l| l.split(',').count() == 129));
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn synth_outputs_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    for f in [&a, &b] {
        assert!(run(&[
            "synth",
            "--kind",
            "pink",
            "--seconds",
            "0.5",
            "--seed",
            "3",
            "--out",
            p(f)
        ])
        .status
        .success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let r = dir.path().join("r.csv");
    let out = run(&[
        "synth",
        "--kind",
        "ripple",
        "--spectral",
        "2",
        "--temporal",
        "-4",
        "--seconds",
        "0.5",
        "--out",
        p(&r),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&r).unwrap().lines().count(), 101);
}

#[test]
fn cortical_summary_has_one_row_per_filter() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("n.wav");
    let csv = dir.path().join("c.csv");
    assert!(run(&[
        "synth",
        "--kind",
        "pink",
        "--seconds",
        "0.3",
        "--out",
        p(&wav)
    ])
    .status
    .success());
    let out = run(&[
        "cortical",
        "--in",
        p(&wav),
        "--out",
        p(&csv),
        "--init",
        "random",
        "--seed",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(text.starts_with("filter,spectral_cpo,temporal_hz,energy,mean_abs\n"));
}

fn write_manifest(dir: &Path) -> std::path::PathBuf {
    let data = toy_classification(0, 2, 0.5).unwrap();
    let mut items = Vec::new();
    for (i, item) in data.items.iter().enumerate() {
        let (wav, lab) = (format!("{i}.wav"), format!("{i}.csv"));
        write_wav(dir.join(&wav), &item.wave).unwrap();
        write_labels(&dir.join(&lab), item.labels.as_ref().unwrap()).unwrap();
        items.push(ManifestItem {
            audio: wav.into(),
            labels: Some(lab.into()),
            role: None,
        });
    }
    let path = dir.join("manifest.json");
    Manifest {
        classes: data.classes,
        items,
    }
    .write(&path)
    .unwrap();
    path
}

#[test]
fn train_eval_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path());
    let train = |name: &str| {
        let ck = dir.path().join(name);
        let log = dir.path().join(format!("{name}.log"));
        let out = run(&[
            "train",
            "--task",
            "classify",
            "--ablation",
            "full",
            "--init",
            "random",
            "--manifest",
            p(&manifest),
            "--steps",
            "3",
            "--seed",
            "1",
            "--batch",
            "2",
            "--crop-seconds",
            "0.1",
            "--eval-every",
            "3",
            "--out",
            p(&ck),
            "--log",
            p(&log),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        (ck, log)
    };
    let (a, log) = train("a.json");
    let (b, _) = train("b.json");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(log).unwrap();
    assert!(log.starts_with("step,loss,probe_accuracy\n"));
    assert_eq!(log.lines().count(), 4);

    let report = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--ckpt",
        p(&a),
        "--manifest",
        p(&manifest),
        "--protocol",
        "pink[-3,0,3]",
        "--n-items",
        "4",
        "--out",
        p(&report),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let conditions = json["conditions"].as_array().unwrap();
    assert_eq!(conditions.len(), 4);
    assert!(conditions[0]["metrics"][0]["ci95"].is_number());

    let out = run(&[
        "eval",
        "--ckpt",
        p(&a),
        "--manifest",
        p(&manifest),
        "--protocol",
        "enhance0db",
        "--out",
        p(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let params = dir.path().join("params.csv");
    assert!(
        run(&["export-params", "--ckpt", p(&a), "--out", p(&params)])
            .status
            .success()
    );
    assert!(std::fs::read_to_string(&params)
        .unwrap()
        .starts_with("# cortical\nindex,omega_hz,capital_omega_cpo,sign"));
}

#[test]
fn frontend_gradcheck_passes_on_fresh_init() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("gc.csv");
    let out = run(&[
        "gradcheck",
        "--scope",
        "frontend",
        "--seed",
        "0",
        "--tol",
        "1e-4",
        "--out",
        p(&table),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 212);
    assert!(rows.iter().all(|r| r.ends_with(",Pass")));
}
