use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stmoe::checkpoint::Checkpoint;

const TINY: &[&str] = &[
    "grid=8",
    "hidden=8",
    "heads=2",
    "layers=1",
    "ffn=16",
    "experts=2",
    "top_k=1",
    "expert_ffn=16",
    "emb_loc=8",
    "history_len=24",
    "mlm_stride=24",
    "batch_size=16",
];

fn stmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmoe")).args(args).output().expect("spawn stmoe")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    for kv in TINY {
        args.push("--set");
        args.push(kv);
    }
    args
}

fn city(dir: &Path, name: &str, users: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(stmoe(&["generate", "--out", p(&out), "--users", users, "--grid", "8", "--seed", seed]));
    out
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = city(dir.path(), "a.csv", "3", "5");
    let b = city(dir.path(), "b.csv", "3", "5");
    let c = city(dir.path(), "c.csv", "3", "6");
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_ne!(text, std::fs::read_to_string(&c).unwrap());
    assert!(text.starts_with("uid,d,t,x,y\n"));
    assert!(dir.path().join("a.csv.params").exists());
    let grid = stmoe_core::mobility::Grid::new(8).unwrap();
    let users = stmoe::data::load_city(&a, grid).unwrap();
    assert_eq!(users.len(), 3);
}

#[test]
fn usage_and_io_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    assert_eq!(code(&stmoe(&["generate", "--out", p(&out), "--users", "0"])), 64);
    assert_eq!(code(&stmoe(&["generate", "--out", "/nonexistent/dir/x.csv", "--users", "1"])), 2);
    assert_eq!(code(&stmoe(&["generate", "--bogus"])), 64);
    let data = city(dir.path(), "c.csv", "2", "1");
    let run = dir.path().join("run");
    let o = stmoe(&["finetune", "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 64);
    let o = stmoe(&["train-scratch", "--data", p(&data), "--out", p(&run), "--set", "widht=3"]);
    assert_eq!(code(&o), 64);
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "uid,d,t,x,y\n1,1,1,9,1\n").unwrap();
    let o = stmoe(&with_tiny(vec!["train-scratch", "--data", p(&bad), "--out", p(&run)]));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn help_lists_every_config_key() {
    for sub in ["pretrain", "finetune", "train-scratch", "evaluate", "gradcheck"] {
        let text = ok(stmoe(&[sub, "--help"]));
        for (k, _) in stmoe::config::KEY_DOCS {
            assert!(text.contains(k), "{sub} --help misses {k}");
        }
    }
    let text = ok(stmoe(&["generate", "--help"]));
    for (k, _) in stmoe::data::SYNTH_KEYS {
        assert!(text.contains(k), "generate --help misses {k}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = city(dir.path(), "c.csv", "2", "2");
    let run = dir.path().join("run");
    ok(stmoe(&with_tiny(vec!["pretrain", "--data", p(&data), "--out", p(&run), "--epochs", "0"])));
    let names: Vec<String> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    assert_eq!(names, vec!["epoch-000.ckpt".to_string()]);

    let path = run.join("epoch-000.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let c = Checkpoint::load(&path).unwrap();
    assert_eq!(c.to_bytes(), bytes);
    let copy = dir.path().join("copy.ckpt");
    c.save(&copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), bytes);
    let model = c.model().unwrap();
    assert_eq!(model.params.len(), c.tensors.iter().filter(|t| !t.name.starts_with("adam.")).count());

    let mut broken = bytes.clone();
    broken[0] = b'X';
    std::fs::write(&copy, &broken).unwrap();
    let e = Checkpoint::load(&copy).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    std::fs::write(&copy, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(Checkpoint::load(&copy).unwrap_err().exit_code(), 3);
    let report = dir.path().join("r.csv");
    let o = stmoe(&["evaluate", "--model", p(&copy), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn finetune_logs_tenfold_location_rate_and_rejects_other_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let src = city(dir.path(), "src.csv", "3", "3");
    let tgt = city(dir.path(), "tgt.csv", "2", "4");
    let pre = dir.path().join("pre");
    let out = ok(stmoe(&with_tiny(vec!["pretrain", "--data", p(&src), "--out", p(&pre), "--epochs", "1"])));
    assert!(out.contains("best="));
    assert!(pre.join("best").exists());
    let log = std::fs::read_to_string(pre.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,phase,loss,lr_base,lr_loc\n"));

    let ft = dir.path().join("ft");
    ok(stmoe(&["finetune", "--from", p(&pre), "--data", p(&tgt), "--out", p(&ft), "--epochs", "1", "--set", "history_len=24"]));
    let log = std::fs::read_to_string(ft.join("train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[2], "finetune");
        let base: f64 = f[4].parse().unwrap();
        let loc: f64 = f[5].parse().unwrap();
        assert_eq!(loc, 10.0 * base, "{row}");
    }
    let routing = std::fs::read_to_string(ft.join("routing.csv")).unwrap();
    assert!(routing.starts_with("epoch,expert,top1_count\n"));

    let o = stmoe(&["finetune", "--from", p(&pre), "--data", p(&tgt), "--out", p(&ft), "--set", "hidden=16"]);
    assert_eq!(code(&o), 3);
    let report = dir.path().join("r.csv");
    let o = stmoe(&["evaluate", "--model", p(&ft), "--data", p(&tgt), "--report", p(&report), "--set", "experts=4"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = city(dir.path(), "c.csv", "2", "8");
    let full = dir.path().join("full");
    ok(stmoe(&with_tiny(vec!["train-scratch", "--data", p(&data), "--out", p(&full), "--epochs", "2"])));
    let part = dir.path().join("part");
    ok(stmoe(&with_tiny(vec!["train-scratch", "--data", p(&data), "--out", p(&part), "--epochs", "1"])));
    let from = part.join("epoch-001.ckpt");
    ok(stmoe(&["train-scratch", "--data", p(&data), "--out", p(&part), "--resume", p(&from), "--epochs", "2"]));
    for f in ["epoch-002.ckpt", "train_log.csv", "routing.csv"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn frequency_baseline_is_exact_on_a_noiseless_city() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("clean.params");
    std::fs::write(&params, "epsilon=0\npresence_day=1\npresence_night=1\nweekend_presence=1\n").unwrap();
    let data = dir.path().join("clean.csv");
    ok(stmoe(&["generate", "--out", p(&data), "--users", "4", "--grid", "40", "--seed", "9", "--params", p(&params)]));
    let report = dir.path().join("hf.csv");
    let preds = dir.path().join("pred.csv");
    let line = ok(stmoe(&[
        "evaluate", "--baseline", "hf", "--data", p(&data), "--report", p(&report), "--predictions", p(&preds),
    ]));
    let fields = stmoe::report::parse_summary(line.trim());
    let get = |k: &str| fields.iter().find(|(a, _)| a == k).map(|(_, v)| v.clone()).unwrap();
    assert_eq!(get("city"), "clean");
    assert_eq!(get("accuracy").parse::<f64>().unwrap(), 1.0);
    assert_eq!(get("dtw").parse::<f64>().unwrap(), 0.0);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with('#'));
    assert_eq!(lines.next().unwrap(), "city,uid,day,accuracy,geo_bleu,dtw");
    assert!(text.contains("clean,all,,1.000000,"));
    assert_eq!(std::fs::read_to_string(stmoe::report::summary_path(&report)).unwrap().trim(), line.trim());
    assert!(std::fs::read_to_string(&preds).unwrap().starts_with("uid,d,t,x,y\n"));
}

#[test]
fn gradcheck_command_reports_and_gates() {
    let args = ["gradcheck", "--set", "gc_hidden=8", "--set", "gc_experts=2", "--set", "grid=8"];
    let out = ok(stmoe(&args));
    assert!(out.contains("embed.loc"));
    assert!(out.lines().last().unwrap().starts_with("max_rel_err="));
}
