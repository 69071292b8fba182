use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_argue-lab");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("ARGUE_LAB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Asserts failure with one `error kind=<kind>` line on stderr.
fn fails(args: &[&str], kind: &str) {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error ")).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    assert!(
        lines[0].starts_with(&format!("error kind={kind} ")),
        "stderr: {stderr}"
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

/// A default-shaped task with few test images so training stays quick.
fn gen_small(dir: &Path, seed: u64) -> std::path::PathBuf {
    let spec = dir.join(format!("spec{seed}.json"));
    std::fs::write(&spec, r#"{"test_per_class": 20}"#).unwrap();
    let out = dir.join(format!("task{seed}"));
    ok(&[
        "gen",
        "--spec",
        p(&spec),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&out),
    ]);
    out
}

#[test]
fn gen_writes_task_files_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 0);
    for f in ["task.json", "vocab.json", "pool.json", "manifest.json"] {
        assert!(task.join(f).exists(), "{f} missing");
    }
    let spec = tmp.path().join("spec0.json");
    fails(
        &["gen", "--spec", p(&spec), "--seed", "0", "--out", p(&task)],
        "output_exists",
    );
    ok(&[
        "gen",
        "--spec",
        p(&spec),
        "--seed",
        "0",
        "--out",
        p(&task),
        "--force",
    ]);

    let other = gen_small(tmp.path(), 1);
    for f in ["task.json", "vocab.json", "pool.json"] {
        assert_ne!(
            read(&task.join(f)),
            read(&other.join(f)),
            "{f} ignores the seed"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&task.join("manifest.json"))).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn validate_checks_pool_against_task() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 2);
    ok(&[
        "validate",
        "--pool",
        p(&task.join("pool.json")),
        "--task",
        p(&task),
    ]);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"version": 1, "classes": "nope"}"#).unwrap();
    let out = run(&["validate", "--pool", p(&bad)]);
    assert!(!out.status.success());
}

#[test]
fn sample_clamps_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 3);
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    ok(&[
        "sample",
        "--task",
        p(&task),
        "--clusters",
        "3",
        "--out",
        p(&a),
    ]);
    ok(&[
        "sample",
        "--task",
        p(&task),
        "--clusters",
        "3",
        "--out",
        p(&b),
    ]);
    assert_eq!(read(&a), read(&b));
    let sel: serde_json::Value = serde_json::from_slice(&read(&a)).unwrap();
    for class in sel["classes"].as_array().unwrap() {
        assert_eq!(class["selected"].as_array().unwrap().len(), 3);
    }
    assert!(tmp.path().join("a.json.manifest.json").exists());

    let wide = tmp.path().join("wide.json");
    let out = ok(&[
        "sample",
        "--task",
        p(&task),
        "--clusters",
        "20",
        "--out",
        p(&wide),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("clamping cluster count 20"));
    let sel: serde_json::Value = serde_json::from_slice(&read(&wide)).unwrap();
    for class in sel["classes"].as_array().unwrap() {
        let n = class["selected"].as_array().unwrap().len();
        assert!((1..20).contains(&n), "{n} attributes kept");
    }
}

#[test]
fn train_and_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 4);
    let run_a = tmp.path().join("run_a");
    let run_b = tmp.path().join("run_b");
    for out in [&run_a, &run_b] {
        ok(&[
            "train",
            "--task",
            p(&task),
            "--mode",
            "argue_n",
            "--epochs",
            "2",
            "--out",
            p(out),
        ]);
    }
    for f in ["checkpoint.json", "history.csv"] {
        assert_eq!(
            read(&run_a.join(f)),
            read(&run_b.join(f)),
            "{f} differs between reruns"
        );
    }
    let history = String::from_utf8(read(&run_a.join("history.csv"))).unwrap();
    assert_eq!(
        history.lines().next().unwrap(),
        "epoch,l_ent,l_reg,l_neg,total"
    );
    assert_eq!(history.lines().count(), 3);
    fails(
        &[
            "train",
            "--task",
            p(&task),
            "--epochs",
            "1",
            "--out",
            p(&run_a),
        ],
        "output_exists",
    );

    let report_a = tmp.path().join("report_a");
    let report_b = tmp.path().join("report_b");
    let ckpt = run_a.join("checkpoint.json");
    for out in [&report_a, &report_b] {
        ok(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--task",
            p(&task),
            "--out",
            p(out),
        ]);
    }
    assert_eq!(
        read(&report_a.join("report.csv")),
        read(&report_b.join("report.csv"))
    );
    assert_eq!(
        read(&report_a.join("report.md")),
        read(&report_b.join("report.md"))
    );
    let csv = String::from_utf8(read(&report_a.join("report.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "one row per split: {csv}");
    let acc = |name: &str| -> f64 {
        let row = rows
            .iter()
            .find(|r| r.starts_with(&format!("{name},")))
            .unwrap();
        row.split(',').nth(1).unwrap().parse().unwrap()
    };
    let (base, new) = (acc("base_test"), acc("new_test"));
    let h = if base + new > 0.0 {
        2.0 * base * new / (base + new)
    } else {
        0.0
    };
    let md = String::from_utf8(read(&report_a.join("report.md"))).unwrap();
    assert!(md.contains("| Base | New | H |"), "{md}");
    assert!(
        md.contains(&format!("{h:.2}")),
        "H {h:.2} missing from {md}"
    );

    fails(
        &[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--task",
            p(&task),
            "--splits",
            "nope",
            "--out",
            p(&tmp.path().join("r3")),
        ],
        "unknown_split",
    );
}

#[test]
fn baseline_ignores_pool_and_argue_needs_one() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 5);
    std::fs::remove_file(task.join("pool.json")).unwrap();
    ok(&[
        "train",
        "--task",
        p(&task),
        "--mode",
        "baseline",
        "--epochs",
        "1",
        "--out",
        p(&tmp.path().join("b")),
    ]);
    fails(
        &[
            "train",
            "--task",
            p(&task),
            "--mode",
            "argue",
            "--epochs",
            "1",
            "--out",
            p(&tmp.path().join("a")),
        ],
        "missing_pool",
    );
}

#[test]
fn config_file_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 6);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# quick run\ntrain.epochs = 1\nloss.gamma = 1.5\ntrain.mode = argue\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--task",
        p(&task),
        "--config",
        p(&cfg),
        "--mode",
        "argue_n",
        "--out",
        p(&out),
    ]);
    let ckpt: serde_json::Value =
        serde_json::from_slice(&read(&out.join("checkpoint.json"))).unwrap();
    assert_eq!(ckpt["config"]["epochs"], 1);
    assert_eq!(ckpt["config"]["gamma"], 1.5);
    assert_eq!(ckpt["config"]["mode"], "argue_n");

    std::fs::write(&cfg, "train.nonsense = 1\n").unwrap();
    fails(
        &[
            "train",
            "--task",
            p(&task),
            "--config",
            p(&cfg),
            "--out",
            p(&tmp.path().join("x")),
        ],
        "config",
    );
    fails(
        &[
            "train",
            "--task",
            p(&task),
            "--gamma=-1",
            "--out",
            p(&tmp.path().join("y")),
        ],
        "negative_weight",
    );
}

#[test]
fn sweep_rows_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 7);
    let out = tmp.path().join("sweep.csv");
    let args = [
        "sweep",
        "--task",
        p(&task),
        "--param",
        "gamma",
        "--values",
        "0:5:1",
        "--epochs",
        "1",
        "--out",
        p(&out),
    ];
    ok(&args);
    let first = read(&out);
    let csv = String::from_utf8(first.clone()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "param,base,new,h,ood_mean");
    assert_eq!(csv.lines().count(), 7);
    fails(&args, "output_exists");

    let mut resume = args.to_vec();
    resume.push("--skip-existing");
    let stdout = String::from_utf8(ok(&resume).stdout).unwrap();
    assert!(stdout.contains("(0 run, 6 reused)"), "{stdout}");
    assert_eq!(read(&out), first);

    let wider = [
        "sweep",
        "--task",
        p(&task),
        "--param",
        "gamma",
        "--values",
        "0:6:1",
        "--epochs",
        "1",
        "--out",
        p(&out),
        "--skip-existing",
    ];
    let stdout = String::from_utf8(ok(&wider).stdout).unwrap();
    assert!(stdout.contains("(1 run, 6 reused)"), "{stdout}");

    fails(
        &[
            "sweep",
            "--task",
            p(&task),
            "--param",
            "gamma",
            "--values",
            "5:0:1",
            "--out",
            p(&tmp.path().join("s2.csv")),
        ],
        "bad_values",
    );
    fails(
        &[
            "sweep",
            "--task",
            p(&task),
            "--param",
            "lr",
            "--values",
            "1",
            "--out",
            p(&tmp.path().join("s3.csv")),
        ],
        "unknown_parameter",
    );
}

#[test]
fn clusters_sweep_covers_one_to_fifteen() {
    let tmp = tempfile::tempdir().unwrap();
    let task = gen_small(tmp.path(), 8);
    let out = tmp.path().join("clusters.csv");
    ok(&[
        "sweep",
        "--task",
        p(&task),
        "--param",
        "clusters",
        "--values",
        "1:15:1",
        "--epochs",
        "1",
        "--out",
        p(&out),
    ]);
    let csv = String::from_utf8(read(&out)).unwrap();
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn missing_inputs_fail_on_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent");
    fails(
        &[
            "train",
            "--task",
            p(&missing),
            "--out",
            p(&tmp.path().join("o")),
        ],
        "io",
    );
    fails(
        &[
            "eval",
            "--checkpoint",
            p(&missing.join("c.json")),
            "--task",
            p(&missing),
            "--out",
            p(&tmp.path().join("e")),
        ],
        "io",
    );
}
