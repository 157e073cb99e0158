use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_spegc");

fn spegc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Short stream and cheap pretraining so each run takes well under a second.
const SMALL: &str = r#"{
  "seed": 3,
  "pretrain": {"epochs": 2, "source_images": 4},
  "stream": {"steps_per_domain": 3, "image_size": 24}
}"#;

fn small_setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    let o = spegc(
        dir.path(),
        &["pretrain", "--config", "cfg.json", "--out", "ck.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = dir.path().join("ck.json");
    (dir, ck)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pretrain_is_reproducible() {
    let (dir, _) = small_setup();
    let o = spegc(
        dir.path(),
        &["pretrain", "--config", "cfg.json", "--out", "again.json"],
    );
    assert_eq!(code(&o), 0);
    let a = std::fs::read(dir.path().join("ck.json")).unwrap();
    let b = std::fs::read(dir.path().join("again.json")).unwrap();
    assert_eq!(a, b);

    let o = spegc(
        dir.path(),
        &[
            "pretrain", "--config", "cfg.json", "--out", "e0.json", "--epochs", "0",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_ne!(a, std::fs::read(dir.path().join("e0.json")).unwrap());
}

#[test]
fn malformed_config_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"seed\": 1,\n").unwrap();
    let o = spegc(
        dir.path(),
        &["pretrain", "--config", "bad.json", "--out", "x.json"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3 column"), "{}", stderr(&o));
    assert!(!dir.path().join("x.json").exists());

    std::fs::write(dir.path().join("unk.json"), r#"{"seeds": 1}"#).unwrap();
    let o = spegc(
        dir.path(),
        &["pretrain", "--config", "unk.json", "--out", "x.json"],
    );
    assert_eq!(code(&o), 2);

    let o = spegc(dir.path(), &["pretrain", "--out"]);
    assert_eq!(code(&o), 2);
    let o = spegc(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn checkpoint_version_mismatch_exits_3() {
    let (dir, ck) = small_setup();
    let mut v = read_json(&ck);
    v["format_version"] = Value::from(99);
    std::fs::write(dir.path().join("old.json"), v.to_string()).unwrap();
    let o = spegc(
        dir.path(),
        &[
            "adapt",
            "--config",
            "cfg.json",
            "--checkpoint",
            "old.json",
            "--out",
            "log.jsonl",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    std::fs::write(dir.path().join("junk.json"), "[1, 2]").unwrap();
    let o = spegc(
        dir.path(),
        &[
            "adapt",
            "--config",
            "cfg.json",
            "--checkpoint",
            "junk.json",
            "--out",
            "log.jsonl",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = spegc(
        dir.path(),
        &[
            "adapt",
            "--config",
            "cfg.json",
            "--checkpoint",
            "missing.json",
            "--out",
            "l.jsonl",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn adapt_writes_log_and_summary() {
    let (dir, _) = small_setup();
    let o = spegc(
        dir.path(),
        &[
            "adapt",
            "--config",
            "cfg.json",
            "--checkpoint",
            "ck.json",
            "--out",
            "log.jsonl",
            "--rounds",
            "2",
            "--save",
            "adapted.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let lines: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["type"], "config");
    assert_eq!(lines[0]["config"]["adapt"]["rounds"], 2);
    assert_eq!(lines.len(), 1 + 2 * 2 * 3);
    assert!(lines[1..].iter().all(|l| l["type"] == "step"));
    assert_eq!(lines.last().unwrap()["round"], 1);

    let summary = read_json(&dir.path().join("log.jsonl.summary.json"));
    let s = &summary["summary"];
    assert!(s["adapted_dice"].as_f64().is_some());
    assert!(s["baseline_dice"].as_f64().is_some());
    assert_eq!(s["steps"], 12);
    assert_eq!(s["per_domain"].as_object().unwrap().len(), 2);

    // The saved model resumes: prompts and optimizer state travel with it.
    let saved = read_json(&dir.path().join("adapted.json"));
    assert!(saved["adapter"].is_object());
    let o = spegc(
        dir.path(),
        &[
            "adapt",
            "--config",
            "cfg.json",
            "--checkpoint",
            "adapted.json",
            "--out",
            "resumed.jsonl",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn shuffled_stream_is_deterministic() {
    let (dir, _) = small_setup();
    let run = |out: &str| {
        let o = spegc(
            dir.path(),
            &[
                "adapt",
                "--config",
                "cfg.json",
                "--checkpoint",
                "ck.json",
                "--out",
                out,
                "--shuffle",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("a.jsonl");
    assert_eq!(a, run("b.jsonl"));
    let text = String::from_utf8(a).unwrap();
    let domains: Vec<String> = text
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["domain_id"].to_string())
        .collect();
    let first = &domains[0];
    assert!(domains.iter().any(|d| d != first));
}

fn solve(dir: &Path, csv: &str, extra: &[&str]) -> (Output, Option<Value>, String) {
    std::fs::write(dir.join("a.csv"), csv).unwrap();
    let _ = std::fs::remove_file(dir.join("s.csv"));
    let mut args = vec!["solve", "--affinity", "a.csv", "--out", "s.csv"];
    args.extend_from_slice(extra);
    let o = spegc(dir, &args);
    let diag = std::fs::read_to_string(dir.join("s.csv.json"))
        .ok()
        .map(|t| serde_json::from_str(&t).unwrap());
    let refined = std::fs::read_to_string(dir.join("s.csv")).unwrap_or_default();
    (o, diag, refined)
}

fn parse_csv(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn solve_two_nodes_one_component() {
    let dir = TempDir::new().unwrap();
    let (o, diag, refined) = solve(
        dir.path(),
        "1,0.2\n0.3,0.5\n",
        &["--z", "1", "--max-iter", "20000"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = diag.unwrap();
    assert_eq!(d["k"], 1);
    assert_eq!(d["k_clamped"], false);
    assert_eq!(d["converged"], true);
    let m = parse_csv(&refined);
    assert_eq!((m.len(), m[0].len()), (2, 2));
    let total: f64 = m.iter().flatten().sum();
    assert!((total - 1.0).abs() < 1e-6);
    // The strongest affinity takes the budget.
    assert!(m[0][0] > 0.5);
}

#[test]
fn solve_clamps_large_component_count() {
    let dir = TempDir::new().unwrap();
    let (o, diag, _) = solve(dir.path(), "0.1,0.9\n0.4,0.2\n", &["--z", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = diag.unwrap();
    assert_eq!(
        (d["k"].as_u64(), d["k_clamped"].as_bool()),
        (Some(1), Some(true))
    );
}

#[test]
fn solve_linear_mode_is_uniform() {
    let dir = TempDir::new().unwrap();
    let (o, _, refined) = solve(
        dir.path(),
        "0.9,0.1,0.5\n0.3,0.8,0.0\n0.2,0.6,0.7\n",
        &["--z", "1", "--cost-mode", "linear"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for v in parse_csv(&refined).iter().flatten() {
        assert!((v - 2.0 / 9.0).abs() <= 1e-4, "{v}");
    }
}

#[test]
fn solve_rejects_bad_matrices() {
    let dir = TempDir::new().unwrap();
    for csv in [
        "1,2,3\n4,5,6\n",
        "1,2\n3\n",
        "1,x\n2,3\n",
        "",
        "1\n",
        "1,NaN\n0,1\n",
    ] {
        let (o, _, _) = solve(dir.path(), csv, &["--z", "1"]);
        assert_eq!(code(&o), 2, "{csv:?}: {}", stderr(&o));
    }
    let (o, _, _) = solve(dir.path(), "1,0\n0,1\n", &["--z", "1", "--theta", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_probe_is_exactly_zero() {
    let dir = TempDir::new().unwrap();
    for iters in ["1", "5"] {
        let o = spegc(
            dir.path(),
            &[
                "gradcheck",
                "--size",
                "6",
                "--iters",
                iters,
                "--json",
                "g.json",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r = read_json(&dir.path().join("g.json"));
        assert_eq!(r["iterations"].as_u64().unwrap().to_string(), iters);
        let groups = r["groups"].as_array().unwrap();
        assert_eq!(groups.len(), 8);
        assert!(groups.iter().all(|g| g["passed"] == true));
        let probe = groups.iter().find(|g| g["group"] == "sg_probe").unwrap();
        assert_eq!(probe["max_abs_analytic"].as_f64(), Some(0.0));
    }
    let o = spegc(dir.path(), &["gradcheck", "--size", "40"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_limits() {
    let dir = TempDir::new().unwrap();
    let o = spegc(
        dir.path(),
        &[
            "oracle",
            "--instances",
            "5",
            "--theta-sweep",
            "0.001,1000",
            "--json",
            "o.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&dir.path().join("o.json"));
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows[0]["agreement"].as_f64(), Some(1.0));
    assert_eq!(rows[0]["exact"].as_f64(), Some(1.0));
    assert!(rows[1]["gap_to_uniform"].as_f64().unwrap() <= 1e-3);

    let o = spegc(
        dir.path(),
        &[
            "oracle",
            "--instances",
            "5",
            "--cost-mode",
            "linear",
            "--theta-sweep",
            "0.05",
            "--json",
            "l.json",
        ],
    );
    assert_eq!(code(&o), 0);
    let r = read_json(&dir.path().join("l.json"));
    assert!(r["rows"][0]["gap_to_uniform"].as_f64().unwrap() <= 1e-4);

    for bad in [&["--k", "50"][..], &["--e", "1"], &["--theta-sweep", "-1"]] {
        let mut args = vec!["oracle"];
        args.extend_from_slice(bad);
        assert_eq!(code(&spegc(dir.path(), &args)), 2, "{bad:?}");
    }
}
