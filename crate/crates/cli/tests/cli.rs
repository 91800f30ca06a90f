use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "n_layers": 1, "d_model": 16, "n_heads": 2, "context_len": 96, "prompt_window": 40,
  "num_epochs": 1, "batch_size": 8, "lr": 1e-3,
  "max_steps": 3, "sims_per_prompt": 4, "accum_grad_steps": 2, "max_new_tokens": 40,
  "eval_every": 2, "eval_set_size": 4,
  "lexicon_size": 40, "train_size": 24, "test_size": 6
}"#;

fn lexrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexrl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lexrl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir`, relative path and bytes, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Toy data, SFT, RL and evaluation in `root/name`.
fn pipeline(root: &Path, name: &str) -> PathBuf {
    let run = root.join(name);
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("cfg.json"), TINY).unwrap();
    let base = ["--config", "cfg.json", "--seed", "5"];
    fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
        [base, extra].concat()
    }
    ok(&run, &with(&base, &["toygen", "--out-dir", "toy"]));
    ok(&run, &with(&base, &["sft", "--corpus", "toy/train.tsv", "--dict", "toy/dict.tsv", "--out", "sft"]));
    ok(&run, &with(&base, &["rl", "--ckpt", "sft", "--corpus", "toy/train.tsv", "--dict", "toy/dict.tsv", "--out", "rl"]));
    ok(
        &run,
        &with(&base, &[
            "eval", "--ckpt", "rl", "--test", "toy/test.tsv", "--dict", "toy/dict.tsv",
            "--report", "report.json", "--transcripts", "transcripts.jsonl",
        ]),
    );
    fs::remove_file(run.join("cfg.json")).unwrap();
    run
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = TempDir::new().unwrap();
    for flag in ["--help", "--version"] {
        let out = lexrl(tmp.path(), &[flag]);
        assert_eq!(out.status.code(), Some(0), "{flag}");
        assert!(!out.stdout.is_empty());
    }
    let v = ok(tmp.path(), &["--version"]);
    assert!(v.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_one_and_runtime_errors_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(lexrl(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(lexrl(tmp.path(), &["score", "--hyp", "h.txt"]).status.code(), Some(1));
    let missing = lexrl(tmp.path(), &["dict", "build", "--in", "nope.tsv", "--out", "d.tsv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.tsv"));
    fs::write(tmp.path().join("bad.json"), r#"{"max_stepz": 1}"#).unwrap();
    let bad = lexrl(tmp.path(), &["--config", "bad.json", "toygen", "--out-dir", "x"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn dict_build_precedence_flag_over_file_over_default() {
    let tmp = TempDir::new().unwrap();
    let raw = "casa\tpiichi\ncasa grande\tmiichi\nla casa grande\tpiichi\nuna casa muy grande\tx\n";
    fs::write(tmp.path().join("raw.tsv"), raw).unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"max_source_words": 1}"#).unwrap();

    let default = ok(tmp.path(), &["dict", "build", "--in", "raw.tsv", "--out", "a.tsv"]);
    assert_eq!(default.trim(), "kept=4 dropped=0");
    let file = ok(tmp.path(), &["--config", "cfg.json", "dict", "build", "--in", "raw.tsv", "--out", "b.tsv"]);
    assert_eq!(file.trim(), "kept=1 dropped=3");
    let set = ok(
        tmp.path(),
        &["--config", "cfg.json", "--set", "max_source_words=2", "dict", "build", "--in", "raw.tsv", "--out", "c.tsv"],
    );
    assert_eq!(set.trim(), "kept=2 dropped=2");
    let flag = ok(
        tmp.path(),
        &[
            "--config", "cfg.json", "--set", "max_source_words=2",
            "dict", "build", "--in", "raw.tsv", "--out", "d.tsv", "--max-source-words", "3",
        ],
    );
    assert_eq!(flag.trim(), "kept=3 dropped=1");
}

#[test]
fn score_prints_per_line_and_mean() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("h.txt"), "a b c d\nzzz\n").unwrap();
    fs::write(tmp.path().join("r.txt"), "a b c d\na b\n").unwrap();
    let out = ok(tmp.path(), &["score", "--hyp", "h.txt", "--ref", "r.txt"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["line\tscore", "1\t1", "2\t0", "mean\t0.5"]);
    let cer = ok(tmp.path(), &["score", "--hyp", "h.txt", "--ref", "r.txt", "--metric", "character"]);
    assert!(cer.lines().nth(1).unwrap().ends_with("\t1"));
    fs::write(tmp.path().join("short.txt"), "a\n").unwrap();
    assert_eq!(lexrl(tmp.path(), &["score", "--hyp", "short.txt", "--ref", "r.txt"]).status.code(), Some(2));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let a = pipeline(tmp.path(), "a");
    let b = pipeline(tmp.path(), "b");
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let names: Vec<_> = sa.iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    for expected in ["report.json", "report.meta.json", "transcripts.jsonl", "rl/rl_metrics.csv", "rl/rl_eval.csv", "sft/sft_loss.csv"] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }
    assert_eq!(sa.len(), sb.len());
    for ((pa, ba), (pb, bb)) in sa.iter().zip(&sb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between reruns", pa.display());
    }

    let report = json(a.join("report.json"));
    assert_eq!(report.as_object().unwrap().len(), 12);
    assert_eq!(report["n_samples"], 6);

    // replaying the transcripts reproduces the report exactly
    ok(
        &a,
        &["--set", "dict=toy/dict.tsv", "eval", "--replay", "transcripts.jsonl", "--report", "replayed.json"],
    );
    assert_eq!(fs::read(a.join("replayed.json")).unwrap(), fs::read(a.join("report.json")).unwrap());

    // more workers, same bytes
    fs::write(a.join("cfg.json"), TINY).unwrap();
    ok(
        &a,
        &[
            "--config", "cfg.json", "--seed", "5", "--workers", "3",
            "eval", "--ckpt", "rl", "--test", "toy/test.tsv", "--dict", "toy/dict.tsv", "--report", "w3.json",
        ],
    );
    assert_eq!(fs::read(a.join("w3.json")).unwrap(), fs::read(a.join("report.json")).unwrap());
}

#[test]
fn eval_without_tool_reports_zero_tool_fields() {
    let tmp = TempDir::new().unwrap();
    let run = pipeline(tmp.path(), "run");
    fs::write(run.join("cfg.json"), TINY).unwrap();
    ok(
        &run,
        &[
            "--config", "cfg.json", "eval", "--ckpt", "sft", "--test", "toy/test.tsv", "--dict", "toy/dict.tsv",
            "--no-tool", "--report", "nt.json",
        ],
    );
    let r = json(run.join("nt.json"));
    for key in ["answers_with_tools_pct", "avg_tool_calls", "successful_tool_calls_pct"] {
        assert_eq!(r[key].as_f64(), Some(0.0), "{key}");
    }
    assert_eq!(r["successful_queries"], 0);
    assert_eq!(json(run.join("nt.meta.json"))["tool_enabled"], false);
}

#[test]
fn generate_prints_a_transcript() {
    let tmp = TempDir::new().unwrap();
    let run = pipeline(tmp.path(), "run");
    let out = ok(&run, &["--seed", "3", "generate", "--ckpt", "sft", "--text", "hola mundo", "--dict", "toy/dict.tsv"]);
    assert!(out.lines().last().unwrap().starts_with("answer: "));
    let again = ok(&run, &["--seed", "3", "generate", "--ckpt", "sft", "--text", "hola mundo", "--dict", "toy/dict.tsv"]);
    assert_eq!(out, again);
    assert_eq!(
        lexrl(&run, &["generate", "--ckpt", "missing", "--text", "hola"]).status.code(),
        Some(2)
    );
}
