use std::path::Path;
use std::process::{Command, Output};

use iois::checkpoint;
use iois::config::RunConfig;
use iois::datagen::{load_dataset, Provenance};
use iois::diffusion::DenoiserModel;

fn iois(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iois"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = iois(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Small, fast settings shared by the end-to-end tests.
const FAST: &[&str] = &[
    "--set", "classifier.epochs=4",
    "--set", "classifier.hidden=[16]",
    "--set", "denoiser.epochs=3",
    "--set", "denoiser.hidden=[16,16]",
    "--set", "diffusion.steps=50",
];

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    // Test-specific overrides come last so they win.
    args[..1].iter().chain(FAST).chain(&args[1..]).copied().collect()
}

#[test]
fn gen_data_defaults_and_bad_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["gen-data", "--seed", "1", "--out", s(&data)]);
    assert_eq!(load_dataset(&data).unwrap().class_counts(), vec![500, 150, 50]);

    let balanced = dir.path().join("b.csv");
    ok(&[
        "gen-data", "--set", "data.class_counts=[]", "--set", "data.imbalance_ratio=1",
        "--out", s(&balanced),
    ]);
    assert_eq!(load_dataset(&balanced).unwrap().class_counts(), vec![500, 500, 500]);

    let out = iois(&[
        "gen-data", "--set", "data.class_counts=[]", "--set", "data.imbalance_ratio=0.5",
        "--out", s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(iois(&["train"]).status.code(), Some(1));
    assert_eq!(iois(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[classifier]\nepochz = 3\n").unwrap();
    let out = iois(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    assert!(iois(&["--help"]).status.success());
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["gen-data", "--out", s(&data)]);
    let out = iois(&with_fast(&[
        "pretrain-dm", "--data", s(&data), "--out", s(&dir.path().join("dm")),
        "--set", "denoiser.learning_rate=50", "--set", "denoiser.epochs=20",
    ]));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_is_reproducible_and_zero_epochs_keep_the_init() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["gen-data", "--out", s(&data)]);

    let zero = dir.path().join("zero");
    ok(&with_fast(&[
        "pretrain-dm", "--data", s(&data), "--out", s(&zero), "--seed", "4",
        "--set", "denoiser.epochs=0",
    ]));
    let (model, _) = checkpoint::load_denoiser(&zero.join("denoiser.ckpt"), Some(2)).unwrap();
    let cfg = RunConfig::from_toml_str(&read(zero.join("config.toml"))).unwrap();
    assert_eq!(model, DenoiserModel::new(2, &cfg.denoiser, 4).unwrap());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&with_fast(&[
            "pretrain-dm", "--data", s(&data), "--out", s(out), "--set", "denoiser.epochs=15",
        ]));
    }
    assert_eq!(read(a.join("denoiser.ckpt")), read(b.join("denoiser.ckpt")));
    assert_eq!(read(a.join("dm_loss.csv")), read(b.join("dm_loss.csv")));
    let losses: Vec<f64> = read(a.join("dm_loss.csv"))
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 15);
    assert!(losses.last().unwrap() < losses.first().unwrap());
}

#[test]
fn train_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["gen-data", "--out", s(&data)]);
    let dm = dir.path().join("dm");
    ok(&with_fast(&["pretrain-dm", "--data", s(&data), "--out", s(&dm)]));
    let ckpt = dm.join("denoiser.ckpt");

    let mut runs = Vec::new();
    for mode in ["ce_baseline", "offline", "ois_uniform", "ois_aas"] {
        let out = dir.path().join(mode);
        ok(&with_fast(&[
            "train", "--data", s(&data), "--checkpoint", s(&ckpt), "--mode", mode,
            "--out", s(&out), "--set", "run.dump_synthetic=true",
        ]));
        for f in [
            "report.csv", "allocations.csv", "test_metrics.csv", "config.toml",
            "classifier_best.ckpt", "classifier_last.ckpt",
        ] {
            assert!(out.join(f).exists(), "{mode}: {f}");
        }
        runs.push(out);
    }
    assert!(dir.path().join("ois_aas/synthetic_epoch1.csv").exists());
    let batch = load_dataset(&dir.path().join("ois_aas/synthetic_epoch1.csv")).unwrap();
    assert_eq!(batch.count_of(Provenance::Synthetic), batch.len());
    assert!(dir.path().join("offline/synthetic_epoch0.csv").exists());

    // Same seed, same bytes.
    let again = dir.path().join("again");
    ok(&with_fast(&["train", "--data", s(&data), "--mode", "ce_baseline", "--out", s(&again)]));
    assert_eq!(read(again.join("test_metrics.csv")), read(runs[0].join("test_metrics.csv")));
    assert_eq!(read(again.join("report.csv")), read(runs[0].join("report.csv")));

    // An empty synthetic budget reduces ois_aas to the baseline.
    let k0 = dir.path().join("k0");
    ok(&with_fast(&[
        "train", "--data", s(&data), "--checkpoint", s(&ckpt), "--mode", "ois_aas",
        "--out", s(&k0), "--set", "run.synthetic_budget=0",
    ]));
    assert_eq!(
        read(k0.join("test_metrics.csv")).replace("ois_aas", "ce_baseline"),
        read(runs[0].join("test_metrics.csv"))
    );

    let mut args = vec!["report"];
    args.extend(runs.iter().map(|p| s(p)));
    let missing = dir.path().join("missing");
    args.push(s(&missing));
    let table = String::from_utf8(ok(&args).stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mode,seed,macro_f1,balanced_accuracy,mcc");
    assert_eq!(lines.len(), 1 + 4 + 4);
    for (run, mean) in lines[1..5].iter().zip(&lines[5..]) {
        let (mode, rest) = run.split_once(",0,").unwrap();
        assert_eq!(*mean, format!("{mode},mean,{rest}"));
    }

    // Missing checkpoint for a mode that needs one.
    let out = iois(&with_fast(&["train", "--data", s(&data), "--mode", "offline", "--out", s(&missing)]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_averages_by_mode() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (i, mode) in ["ce_baseline", "ois_aas"].iter().enumerate() {
        for seed in 0..5 {
            let d = dir.path().join(format!("{mode}{seed}"));
            std::fs::create_dir(&d).unwrap();
            let v = 0.1 * seed as f64 + 0.05 * i as f64;
            std::fs::write(
                d.join("test_metrics.csv"),
                format!(
                    "mode,seed,best_epoch,macro_f1,balanced_accuracy,mcc\n{mode},{seed},3,{v},{},{}\n",
                    v / 2.0,
                    -v
                ),
            )
            .unwrap();
            runs.push(d);
        }
    }
    let out = dir.path().join("table.csv");
    let mut args = vec!["report", "--out", s(&out)];
    args.extend(runs.iter().map(|p| s(p)));
    ok(&args);
    let text = read(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 10 + 2);
    // (0 + 0.1 + 0.2 + 0.3 + 0.4) / 5 = 0.2, plus 0.05 for the second mode.
    assert_eq!(lines[11], "ce_baseline,mean,0.200000,0.100000,-0.200000");
    assert_eq!(lines[12], "ois_aas,mean,0.250000,0.125000,-0.250000");

    let single = dir.path().join("single.csv");
    ok(&["report", "--out", s(&single), s(&runs[3])]);
    assert_eq!(
        read(&single),
        "mode,seed,macro_f1,balanced_accuracy,mcc\n\
         ce_baseline,3,0.300000,0.150000,-0.300000\n\
         ce_baseline,mean,0.300000,0.150000,-0.300000\n"
    );
    assert_eq!(iois(&["report", s(&dir.path().join("nothing"))]).status.code(), Some(1));
}

#[test]
fn sample_writes_labelled_synthetic_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["gen-data", "--out", s(&data)]);
    let dm = dir.path().join("dm");
    ok(&with_fast(&["pretrain-dm", "--data", s(&data), "--out", s(&dm)]));
    let run = dir.path().join("run");
    ok(&with_fast(&["train", "--data", s(&data), "--mode", "ce_baseline", "--out", s(&run)]));

    let out = dir.path().join("s.csv");
    let (ckpt, clf) = (dm.join("denoiser.ckpt"), run.join("classifier_best.ckpt"));
    let args = [
        "sample", "--checkpoint", s(&ckpt),
        "--classifier", s(&clf),
        "--class", "2", "--scale", "1.5", "--n", "40", "--out", s(&out),
    ];
    ok(&args);
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.len(), 40);
    assert_eq!(ds.classes(), 3);
    assert!(ds.labels().iter().all(|&y| y == 2));
    assert_eq!(ds.count_of(Provenance::Synthetic), 40);
    let first = read(&out);
    ok(&args);
    assert_eq!(read(&out), first);

    let bad = iois(&[
        "sample", "--checkpoint", s(&dm.join("denoiser.ckpt")),
        "--classifier", s(&run.join("classifier_best.ckpt")),
        "--class", "3", "--out", s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
