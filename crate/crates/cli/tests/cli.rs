use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = include_str!("../../../configs/quick.toml");

fn mtadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtadapt"))
        .args(args)
        .env("MTADAPT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn param_count_single_layer() {
    let o = mtadapt(&["param-count", "--variant", "SHIM", "--rank", "8", "--d", "64", "--k", "64"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "1088");
    let o = mtadapt(&["param-count", "--variant", "ctcm", "--rank", "2", "--d", "4", "--k", "6"]);
    assert_eq!(stdout(&o).trim(), "28");
    let too_big = mtadapt(&["param-count", "--variant", "LORA", "--rank", "8", "--d", "8", "--k", "64"]);
    assert_eq!(too_big.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &QUICK.replace("rank = 4", "rank = 4\nrnak = 1"));
    let out = dir.path().join("out");
    let o = mtadapt(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rnak"));
}

#[test]
fn non_finite_loss_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = QUICK
        .replace("learning_rate = 0.004", "learning_rate = 1e300")
        .replace("warmup_ratio = 0.06", "warmup_steps = 0")
        .replace("init_std = 0.1", "init_std = 1.0");
    let cfg = write_config(dir.path(), "nan.toml", &text);
    let out = dir.path().join("out");
    let o = mtadapt(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_merge_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let out = dir.path().join("run");
    let o = mtadapt(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "4,5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("seed 4:") && text.contains("seed 5:"));
    for f in ["report.tsv", "report.jsonl", "config.toml", "seed-4/model.mtad", "seed-5/trace.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let ckpt = out.join("seed-4/model.mtad");
    let ckpt = ckpt.to_str().unwrap();
    let eval = mtadapt(&["eval", "--checkpoint", ckpt]);
    assert!(eval.status.success());
    let eval_line = stdout(&eval);
    assert!(eval_line.starts_with("mcc "));

    let merged = dir.path().join("merged.mtad");
    let merged = merged.to_str().unwrap();
    let m = mtadapt(&["merge", "--checkpoint", ckpt, "--out", merged]);
    assert!(m.status.success(), "{}", String::from_utf8_lossy(&m.stderr));
    // folding the adapters leaves the predictions unchanged
    let eval_merged = mtadapt(&["eval", "--checkpoint", merged]);
    assert_eq!(stdout(&eval_merged), eval_line);

    let again = mtadapt(&["merge", "--checkpoint", merged, "--out", merged]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already merged"));

    // pair examples (2·12 + 2 tokens) do not fit this model's max_seq_len
    let pair = mtadapt(&["eval", "--checkpoint", ckpt, "--task", "pair"]);
    assert_eq!(pair.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&pair.stderr).contains("max_seq_len"));
    let unknown = mtadapt(&["eval", "--checkpoint", ckpt, "--task", "poetry"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.mtad");
    std::fs::write(&p, b"MTAD\x01\x00\xff").unwrap();
    let o = mtadapt(&["eval", "--checkpoint", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn grad_check_passes_and_lists_rows() {
    let o = mtadapt(&["grad-check", "--variant", "LORA,CTCM", "--cases", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("adapter/CTCM") && text.contains("merged/LORA") && text.contains("all passed"));
    // LORA has no transform factors to check
    assert!(!text
        .lines()
        .any(|l| l.starts_with("adapter/LORA") && matches!(l.split_whitespace().nth(1), Some("C" | "D"))));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let out = dir.path().join("sweep");
    let o = mtadapt(&[
        "sweep", "--config", &cfg, "--ranks", "1,2", "--variant", "LORA,DTSM", "--seeds", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert_eq!(stdout(&o), table);
}
