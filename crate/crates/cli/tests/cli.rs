use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Workdir {
    dir: tempfile::TempDir,
}

impl Workdir {
    fn new() -> Self {
        Workdir {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], seed_env: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_homecast"));
        cmd.args(args)
            .current_dir(self.dir.path())
            .env_remove("HOMECAST_SEED");
        if let Some(s) = seed_env {
            cmd.env("HOMECAST_SEED", s);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    /// Synthetic check-ins through to a labeled record file.
    fn records(&self) {
        self.ok(&[
            "synth", "--users", "60", "--days", "60", "--out", "c.csv", "--truth", "t.csv",
        ]);
        self.ok(&["cluster", "--checkins", "c.csv", "--out", "cl.csv"]);
        self.ok(&[
            "features",
            "--clustered",
            "cl.csv",
            "--truth",
            "t.csv",
            "--out",
            "r.csv",
        ]);
        self.write(
            "small.json",
            r#"{"forest": {"n_trees": 50}, "folds": 3, "dnnr": {"dropout": 0.0, "epochs": 20, "batch_size": 32, "optimizer": {"kind": "sgd", "learning_rate": 0.1}}}"#,
        );
    }
}

fn first_line(p: &Path) -> String {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn help_and_version_exit_zero() {
    let w = Workdir::new();
    for args in [&["--help"][..], &["--version"], &["evaluate", "--help"]] {
        let out = w.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let w = Workdir::new();
    assert_eq!(w.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(w.run(&["cluster"]).status.code(), Some(1));
    assert_eq!(w.run(&[]).status.code(), Some(1));
    assert_eq!(
        w.run(&["--jobs", "0", "gaps", "--records", "x", "--out", "y"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn bad_data_exits_two_and_bad_config_exits_one() {
    let w = Workdir::new();
    w.write(
        "bad.csv",
        "user_id,timestamp,lat,lon\na,2014-06-01T00:00:00,123,0\n",
    );
    let out = w.run(&["cluster", "--checkins", "bad.csv", "--out", "o.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:2"));
    assert_eq!(
        w.run(&["cluster", "--checkins", "missing.csv", "--out", "o.csv"])
            .status
            .code(),
        Some(2)
    );

    w.write("cfg.json", r#"{"folds": 1}"#);
    w.write("r.csv", "");
    let out = w.run(&[
        "evaluate",
        "--config",
        "cfg.json",
        "--records",
        "r.csv",
        "--out",
        "e.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    w.write("typo.json", r#"{"fold": 5}"#);
    let out = w.run(&[
        "evaluate",
        "--config",
        "typo.json",
        "--records",
        "r.csv",
        "--out",
        "e.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_chain_writes_reports_with_provenance() {
    let w = Workdir::new();
    w.records();
    for f in ["c.csv", "t.csv", "cl.csv", "r.csv"] {
        assert!(first_line(&w.path(f)).starts_with("# homecast "), "{f}");
    }
    w.ok(&["gaps", "--records", "r.csv", "--out", "gaps.json"]);
    w.ok(&[
        "evaluate",
        "--config",
        "small.json",
        "--records",
        "r.csv",
        "--out",
        "e.json",
        "--curve",
        "curve.csv",
        "--grid",
        "0:1:0.25",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("e.json")).unwrap()).unwrap();
    assert!(report["config_hash"].is_string());
    let folds = report["report"]["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 3);
    let curve = std::fs::read_to_string(w.path("curve.csv")).unwrap();
    assert!(curve.starts_with("# homecast "));
    assert_eq!(curve.lines().count(), 1 + 1 + 5);
}

#[test]
fn staged_phase1_and_predict_are_reproducible() {
    let w = Workdir::new();
    w.records();
    w.ok(&[
        "train-forest",
        "--config",
        "small.json",
        "--records",
        "r.csv",
        "--out",
        "forest.json",
    ]);
    w.ok(&[
        "filter",
        "--records",
        "r.csv",
        "--forest",
        "forest.json",
        "--out",
        "kept.csv",
        "--stats",
        "stats.json",
    ]);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("stats.json")).unwrap()).unwrap();
    assert!(stats.to_string().contains("recall"));

    w.ok(&[
        "fit",
        "--config",
        "small.json",
        "--records",
        "r.csv",
        "--out",
        "m.json",
    ]);
    w.ok(&[
        "predict",
        "--model",
        "m.json",
        "--records",
        "r.csv",
        "--out",
        "p1.csv",
    ]);
    w.ok(&[
        "--jobs",
        "1",
        "predict",
        "--model",
        "m.json",
        "--records",
        "r.csv",
        "--out",
        "p2.csv",
    ]);
    let p1 = std::fs::read(w.path("p1.csv")).unwrap();
    assert_eq!(p1, std::fs::read(w.path("p2.csv")).unwrap());
    assert_eq!(String::from_utf8(p1).unwrap().lines().count(), 2 + 60);

    w.ok(&[
        "fit",
        "--config",
        "small.json",
        "--records",
        "r.csv",
        "--out",
        "m2.json",
    ]);
    assert_eq!(
        std::fs::read(w.path("m.json")).unwrap(),
        std::fs::read(w.path("m2.json")).unwrap()
    );

    let out = w.run(&[
        "predict",
        "--model",
        "m.json",
        "--records",
        "r.csv",
        "--gate",
        "1.01",
        "--out",
        "x.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
    w.ok(&[
        "predict",
        "--model",
        "m.json",
        "--records",
        "r.csv",
        "--gate",
        "0",
        "--out",
        "all.csv",
    ]);
    let all = std::fs::read_to_string(w.path("all.csv")).unwrap();
    for l in all.lines().skip(2) {
        assert_eq!(l.contains(",-1,"), l.ends_with(",0"), "{l}");
    }
    w.ok(&[
        "sweep",
        "--model",
        "m.json",
        "--records",
        "r.csv",
        "--grid",
        "0:1:0.5",
        "--out",
        "s.csv",
    ]);
    assert_eq!(
        std::fs::read_to_string(w.path("s.csv"))
            .unwrap()
            .lines()
            .count(),
        2 + 3
    );
}

#[test]
fn seed_precedence_is_flag_then_config_then_environment() {
    let w = Workdir::new();
    let synth = |name: &str, extra: &[&str], env: Option<&str>| {
        let mut args = vec![
            "synth", "--users", "5", "--days", "10", "--out", name, "--truth", "t.csv",
        ];
        args.extend_from_slice(extra);
        let out = w.run_env(&args, env);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(w.path(name)).unwrap()
    };
    let default = synth("d.csv", &[], None);
    let env7 = synth("e.csv", &[], Some("7"));
    let flag7 = synth("f.csv", &["--seed", "7"], Some("9"));
    assert_ne!(default, env7);
    assert_eq!(env7, flag7);

    w.write("g.json", r#"{"seed": 7}"#);
    let cfg7 = synth("g.csv", &["--config", "g.json"], Some("9"));
    assert_eq!(cfg7, env7);
    let flag_beats_cfg = synth("h.csv", &["--config", "g.json", "--seed", "42"], Some("9"));
    assert_eq!(flag_beats_cfg, default);

    let out = w.run_env(
        &[
            "synth", "--users", "5", "--out", "x.csv", "--truth", "t.csv",
        ],
        Some("abc"),
    );
    assert_eq!(out.status.code(), Some(1));
}
