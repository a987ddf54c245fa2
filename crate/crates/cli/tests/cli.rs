use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn langext(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langext"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, lines: &[&str]) -> String {
    let p = dir.join(name);
    fs::write(&p, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    p.to_str().unwrap().to_string()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn metrics_reports_scores_and_copy_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let refs = write(dir.path(), "ref.txt", &["a b c d", "e f g h"]);
    let src = write(dir.path(), "src.txt", &["p q", "r s"]);
    let hyp = write(dir.path(), "hyp.txt", &["x x y", "e f g h"]);
    let out = langext(&["metrics", "--hyp", &hyp, "--ref", &refs]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("bleu\t"));
    assert!(!text.contains("cr="));

    let out = langext(&["metrics", "--hyp", &hyp, "--ref", &refs, "--src", &src]);
    let text = stdout(&out);
    // No copies; one repeat among seven tokens.
    assert_eq!(value(&text, "cr"), 1.0 / 7.0);
    let identical = langext(&["metrics", "--hyp", &refs, "--ref", &refs]);
    assert_eq!(value(&stdout(&identical), "bleu"), 100.0);
}

#[test]
fn bootstrap_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let refs: Vec<String> = (0..30).map(|i| format!("w{i} a b c d")).collect();
    let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
    let r = write(dir.path(), "ref.txt", &refs);
    let good = write(dir.path(), "good.txt", &refs);
    let bad = write(dir.path(), "bad.txt", &vec!["zz"; 30]);
    let run = |seed: &str| stdout(&langext(&["metrics", "--hyp", &good, "--ref", &r, "--against", &bad, "--seed", seed]));
    let a = run("4");
    assert_eq!(a, run("4"));
    assert_eq!(value(&a, "p"), 0.0);
    assert!(a.contains("significant=1"));
}

#[test]
fn errors_are_one_line_with_failure_status() {
    let out = langext(&["metrics", "--hyp", "/nonexistent/h.txt", "--ref", "/nonexistent/r.txt"]);
    assert!(!out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("error kind=io msg=\""), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.txt", &["x", "y"]);
    let b = write(dir.path(), "b.txt", &["x"]);
    let out = langext(&["metrics", "--hyp", &a, "--ref", &b]);
    assert!(!out.status.success());
    assert!(stdout(&out).starts_with("error kind="));
}

#[test]
fn plan_round_trips_through_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&langext(&["plan"]));
    assert!(text.contains("family_seed"));
    let path = dir.path().join("plan.toml");
    fs::write(&path, &text).unwrap();
    let again = stdout(&langext(&["--config", path.to_str().unwrap(), "plan"]));
    assert_eq!(again, text);
    let one_seed = stdout(&langext(&["--seed", "9", "plan"]));
    assert!(one_seed.contains("seeds = [9]"));
}

#[test]
fn family_show_is_reproducible() {
    let a = langext(&["family", "--show"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&langext(&["family", "--show"])));
    assert_ne!(stdout(&a), stdout(&langext(&["--seed", "8", "family", "--show"])));
}
