use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dualseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "schema_version": 1,
  "data": {"num_classes": 3, "num_videos": 6, "frames": [40, 60], "segments": [2, 3], "feature_dim": 4},
  "train": {
    "epochs": 4, "eval_every": 2,
    "backbone": {"num_stages": 2, "layers_per_stage": 2, "hidden_width": 4},
    "loss": {"lambda_B": 0.1, "lambda_S": 1.0, "e_start": 2}
  }
}"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_layout_and_stable_manifest() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = dualseg(&["gen-data", "--config", cfg, "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = dir.path().join("a");
    for p in [
        "groundTruth",
        "features",
        "splits/train.txt",
        "splits/test.txt",
        "classes.txt",
        "manifest.json",
    ] {
        assert!(a.join(p).exists(), "missing {p}");
    }
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(dir.path().join("b/manifest.json")).unwrap()
    );
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["seed"], 2024);
    assert_eq!(m["config"]["data"]["num_videos"], 6);
}

#[test]
fn gen_data_default_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualseg(&["gen-data", "--out", "d", "--format", "csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_dir(dir.path().join("d/groundTruth"))
            .unwrap()
            .count(),
        75
    );
    assert!(dir.path().join("d/features/video_000.csv").exists());
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualseg(
        &["gen-data", "--out", "d", "--set", "data.num_classes=0"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("num_classes"), "{}", stderr(&o));

    let o = dualseg(
        &["gen-data", "--out", "d", "--set", "data.bogus=1"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.bogus"), "{}", stderr(&o));

    fs::write(
        dir.path().join("c.json"),
        r#"{"train": {"epochs": 3, "typo": 1}}"#,
    )
    .unwrap();
    let o = dualseg(&["train", "--config", "c.json", "--out", "r"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("typo"), "{}", stderr(&o));
}

#[test]
fn train_writes_artifacts_and_respects_warm_up() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(
        code(&dualseg(
            &["gen-data", "--config", cfg, "--out", "data"],
            dir.path()
        )),
        0
    );
    let o = dualseg(
        &["train", "--config", cfg, "--data", "data", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("run");
    let log = read_json(&run.join("runlog.json"));
    let epochs = log["run"]["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 4);
    for e in epochs {
        let zero = e["l_S"].as_f64().unwrap() == 0.0;
        assert_eq!(zero, e["epoch"].as_u64().unwrap() < 2);
    }
    assert_eq!(log["cli_config"]["train"]["backbone"]["num_classes"], 3);

    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_sha256="));
    assert_eq!(lines[1], "epoch,F1@10,F1@25,F1@50,Edit,Acc");
    assert_eq!(lines.len(), 4);
    assert!(run.join("checkpoint.bin").exists());
    let preds = fs::read_dir(run.join("predictions")).unwrap().count();
    assert_eq!(
        preds,
        fs::read_to_string(dir.path().join("data/splits/test.txt"))
            .unwrap()
            .lines()
            .count()
    );

    // predictions score like the run's own final report
    let gt = dir.path().join("gt_test");
    fs::create_dir(&gt).unwrap();
    for id in fs::read_to_string(dir.path().join("data/splits/test.txt"))
        .unwrap()
        .lines()
    {
        fs::copy(
            dir.path().join(format!("data/groundTruth/{id}.txt")),
            gt.join(format!("{id}.txt")),
        )
        .unwrap();
    }
    let o = dualseg(
        &[
            "eval",
            "--pred-dir",
            "run/predictions",
            "--gt-dir",
            "gt_test",
            "--out",
            "e.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let e = read_json(&dir.path().join("e.json"));
    assert_eq!(e["report"]["Acc"], log["run"]["final_report"]["Acc"]);
}

#[test]
fn baseline_via_set_logs_zero_auxiliary_losses() {
    let (dir, cfg) = setup();
    let o = dualseg(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "run",
            "--set",
            "loss.lambda_B=0",
            "--set",
            "loss.lambda_S=0",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = read_json(&dir.path().join("run/runlog.json"));
    for e in log["run"]["epochs"].as_array().unwrap() {
        assert_eq!(e["l_B"].as_f64(), Some(0.0));
        assert_eq!(e["l_S"].as_f64(), Some(0.0));
    }
}

#[test]
fn seeds_change_runs_and_repeat_exactly() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    for (out, seed, jobs) in [("s1", "1", "1"), ("s1b", "1", "4"), ("s2", "2", "1")] {
        let o = dualseg(
            &[
                "--jobs", jobs, "train", "--config", cfg, "--out", out, "--seed", seed,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    for f in ["runlog.json", "metrics.csv", "checkpoint.bin"] {
        assert_eq!(read("s1", f), read("s1b", f), "{f}");
    }
    assert_ne!(read("s1", "runlog.json"), read("s2", "runlog.json"));
}

#[test]
fn non_finite_features_exit_3_naming_epoch_and_video() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(
        code(&dualseg(
            &["gen-data", "--config", cfg, "--out", "data", "--format", "csv"],
            dir.path()
        )),
        0
    );
    let train_ids = fs::read_to_string(dir.path().join("data/splits/train.txt")).unwrap();
    let victim = train_ids.lines().next().unwrap().to_owned();
    let path = dir.path().join(format!("data/features/{victim}.csv"));
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut cells: Vec<&str> = lines[5].split(',').collect();
    cells[0] = "NaN";
    lines[5] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let o = dualseg(
        &["train", "--config", cfg, "--data", "data", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains(&victim), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 0"), "{}", stderr(&o));
}

fn write_labels(dir: &Path, name: &str, labels: &[&str]) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(format!("{name}.txt")), labels.join("\n") + "\n").unwrap();
}

#[test]
fn eval_identical_dirs_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["gt", "pred"] {
        write_labels(&dir.path().join(d), "v1", &["a", "a", "b", "b", "c"]);
        write_labels(&dir.path().join(d), "v2", &["x", "y", "y"]);
    }
    let o = dualseg(
        &["eval", "--pred-dir", "pred", "--gt-dir", "gt"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&dir.path().join("eval.json"))["report"].clone();
    for k in ["F1@10", "F1@25", "F1@50", "Edit", "Acc"] {
        assert_eq!(r[k].as_f64(), Some(100.0), "{k}");
    }
    let table = stdout(&o);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["F1@10", "F1@25", "F1@50", "Edit", "Acc"]);
}

#[test]
fn eval_fixture_matches_hand_computed_values() {
    // v1: gt a×4 b×4, pred a×4 b×2 a×2 → acc 6/8, edit 1 − 1/3, F1@10: tp 2 fp 1 fn 0
    // v2: gt c×4, pred c×4 → all perfect, tp 1
    // pooled F1@10: tp 3 fp 1 fn 0 → P 0.75 R 1 → F1 = 6/7
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    write_labels(&gt, "v1", &["a", "a", "a", "a", "b", "b", "b", "b"]);
    write_labels(&pred, "v1", &["a", "a", "a", "a", "b", "b", "a", "a"]);
    write_labels(&gt, "v2", &["c"; 4]);
    write_labels(&pred, "v2", &["c"; 4]);
    let o = dualseg(
        &[
            "eval",
            "--pred-dir",
            "pred",
            "--gt-dir",
            "gt",
            "--out",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&dir.path().join("r.json"))["report"].clone();
    let close = |k: &str, v: f64| {
        assert!(
            (r[k].as_f64().unwrap() - v).abs() < 1e-9,
            "{k}: {} vs {v}",
            r[k]
        )
    };
    close("Acc", 100.0 * 10.0 / 12.0);
    close("Edit", (100.0 * (1.0 - 1.0 / 3.0) + 100.0) / 2.0);
    close("F1@10", 100.0 * 6.0 / 7.0);
    // b×2 vs b×4: IoU 0.5 → still a hit at 0.5
    close("F1@50", 100.0 * 6.0 / 7.0);
}

#[test]
fn eval_missing_prediction_exits_4_naming_the_stem() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(&dir.path().join("gt"), "v1", &["a"]);
    write_labels(&dir.path().join("gt"), "v2", &["a"]);
    write_labels(&dir.path().join("pred"), "v1", &["a"]);
    write_labels(&dir.path().join("pred"), "v9", &["a"]);
    let o = dualseg(
        &["eval", "--pred-dir", "pred", "--gt-dir", "gt"],
        dir.path(),
    );
    assert_eq!(code(&o), 4);
    let err = stderr(&o);
    assert!(
        err.contains("missing predictions: v2") && err.contains("extra predictions: v9"),
        "{err}"
    );
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualseg(&["gradcheck", "--out", "g.json"], dir.path());
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("overall: pass"), "{out}");
    assert!(out.contains("network L_total: stage0.head.weight"), "{out}");
    assert!(out.contains("warm-up"), "{out}");
    let r = read_json(&dir.path().join("g.json"));
    for line in r["report"]["lines"].as_array().unwrap() {
        assert!(line["max_rel_error"].as_f64().unwrap() < 1e-4);
    }

    let o = dualseg(
        &["gradcheck", "--inject-fault", "--set", "gradcheck.trials=1"],
        dir.path(),
    );
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("rel. error"), "{}", stderr(&o));
}

#[test]
fn ablate_tables_and_unknown_arm() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    let o = dualseg(
        &[
            "ablate",
            "--config",
            cfg,
            "--out",
            "abl",
            "--arms",
            "baseline,+LB,+LS,+both",
            "--seeds",
            "0,1",
            "--set",
            "epochs=2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("+both,"));
    let j = read_json(&dir.path().join("abl/ablation.json"));
    assert_eq!(j["table"]["rows"][0]["config"]["loss"]["lambda_B"], 0.0);
    assert_eq!(j["table"]["rows"][0]["runs"].as_array().unwrap().len(), 2);

    let o = dualseg(
        &[
            "ablate",
            "--config",
            cfg,
            "--out",
            "abl2",
            "--arms",
            "baseline,+XY",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 6);
    assert!(stderr(&o).contains("+XY"), "{}", stderr(&o));
}
