use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use cipherbench::backends::SyntheticTask;
use cipherbench::{TokenizerSpec, Vocabulary};
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iclcb"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn iclcb")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "iclcb {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TEXT: &str = "the film was great and the cast was great\n\
the plot was awful , the pacing slow\n\
\n\
a quiet film about a loud family\n\
I loved every minute of it\n";

/// Vocab induced from `TEXT`, plus a frequency table over it.
fn text_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let text = dir.join("corpus.txt");
    fs::write(&text, TEXT).unwrap();
    let vocab = dir.join("vocab.json");
    ok(&["vocab", "induce", "--text", s(&text), "--out", s(&vocab)]);
    let freq = dir.join("freq.tsv");
    ok(&[
        "freq",
        "build",
        "--vocab",
        s(&vocab),
        "--corpus",
        s(&text),
        "--out",
        s(&freq),
    ]);
    (text, vocab, freq)
}

#[test]
fn cipher_apply_then_invert_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (text, vocab, freq) = text_fixture(dir.path());
    let map = dir.path().join("map.json");
    ok(&[
        "cipher",
        "gen",
        "--vocab",
        s(&vocab),
        "--freq",
        s(&freq),
        "--r",
        "0.8",
        "--k",
        "2",
        "--seed",
        "5",
        "--out",
        s(&map),
    ]);
    let ciphered = dir.path().join("c.txt");
    let restored = dir.path().join("r.txt");
    let common = ["--vocab", s(&vocab), "--map", s(&map)];
    ok(&[
        &["cipher", "apply"],
        &common[..],
        &["--input", s(&text), "--out", s(&ciphered)],
    ]
    .concat());
    ok(&[
        &["cipher", "invert"],
        &common[..],
        &["--input", s(&ciphered), "--out", s(&restored)],
    ]
    .concat());
    let c = fs::read_to_string(&ciphered).unwrap();
    assert_ne!(c, TEXT, "r=0.8 should change the text");
    assert_eq!(fs::read(&restored).unwrap(), TEXT.as_bytes());
}

#[test]
fn cipher_gen_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (_, vocab, freq) = text_fixture(dir.path());
    let gen = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "cipher",
            "gen",
            "--vocab",
            s(&vocab),
            "--freq",
            s(&freq),
            "--seed",
            "11",
            "--out",
            s(&out),
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(gen("a.json"), gen("b.json"));
}

#[test]
fn non_bijective_map_cannot_be_inverted() {
    let dir = TempDir::new().unwrap();
    let (text, vocab, freq) = text_fixture(dir.path());
    let map = dir.path().join("map.json");
    ok(&[
        "cipher",
        "gen",
        "--vocab",
        s(&vocab),
        "--freq",
        s(&freq),
        "--out",
        s(&map),
    ]);
    let out = run(&[
        "cipher",
        "invert",
        "--vocab",
        s(&vocab),
        "--map",
        s(&map),
        "--mode",
        "nonbij",
        "--input",
        s(&text),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn jsonl_apply_touches_inputs_only() {
    let dir = TempDir::new().unwrap();
    let (_, vocab, freq) = text_fixture(dir.path());
    let map = dir.path().join("map.json");
    ok(&[
        "cipher",
        "gen",
        "--vocab",
        s(&vocab),
        "--freq",
        s(&freq),
        "--r",
        "1",
        "--k",
        "1",
        "--out",
        s(&map),
    ]);
    let data = dir.path().join("d.jsonl");
    fs::write(
        &data,
        "{\"id\":\"a\",\"input\":\"the film was great\",\"label\":\"positive\"}\n",
    )
    .unwrap();
    let out = dir.path().join("o.jsonl");
    ok(&[
        "cipher",
        "apply",
        "--vocab",
        s(&vocab),
        "--map",
        s(&map),
        "--format",
        "classification",
        "--input",
        s(&data),
        "--out",
        s(&out),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(v["id"], "a");
    assert_eq!(v["label"], "positive");
    assert_ne!(v["input"], "the film was great");
}

struct SimFixture {
    _dir: TempDir,
    config: PathBuf,
    out: PathBuf,
}

/// A synthetic polarity dataset written to disk with a simulated backend.
fn sim_fixture(backend: serde_json::Value) -> SimFixture {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let data = SyntheticTask::new(40, [0.4, 0.2, 0.4], (3, 5), 3).materialize();
    data.tokenizer.vocab().save(&d.join("vocab.json")).unwrap();
    fs::write(d.join("lexicon.tsv"), data.lexicon.to_tsv()).unwrap();
    let jsonl = |insts: Vec<cipherbench::corpus::Instance>| {
        insts
            .iter()
            .map(|i| serde_json::to_string(i).unwrap() + "\n")
            .collect::<String>()
    };
    fs::write(d.join("pool.jsonl"), jsonl(data.task.sentences("p", 300))).unwrap();
    fs::write(d.join("test.jsonl"), jsonl(data.task.sentences("t", 60))).unwrap();
    let mut backend = backend;
    backend["lexicon"] = "lexicon.tsv".into();
    let cfg = serde_json::json!({
        "name": "syn",
        "dataset": "synthetic",
        "paths": {"vocab": "vocab.json", "pool": "pool.jsonl", "test": "test.jsonl"},
        "cipher": {"r": 0.5, "k": 4, "seed": 1},
        "sampling": {"n": 8},
        "backend": backend,
        "runs": 2,
        "labels": ["negative", "positive"],
    });
    let config = d.join("config.json");
    fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = d.join("out");
    SimFixture {
        _dir: dir,
        config,
        out,
    }
}

fn report_line(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("dataset,r,n,acc_nonbij,acc_bij,gap,b,c,method,p,significant")
    );
    lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect()
}

#[test]
fn run_with_zero_rate_has_zero_gap() {
    let fx = sim_fixture(serde_json::json!({"kind": "sim_in_context"}));
    ok(&[
        "run",
        "--config",
        s(&fx.config),
        "--r",
        "0",
        "--out-dir",
        s(&fx.out),
    ]);
    for run in 0..2 {
        assert!(fx
            .out
            .join("syn")
            .join(run.to_string())
            .join("results.jsonl")
            .is_file());
    }
    let row = report_line(&fx.out.join("syn").join("report.csv"));
    assert_eq!(row[0], "synthetic");
    assert_eq!(row[5], "+0.00");
    assert_eq!((row[6].as_str(), row[7].as_str()), ("0", "0"));
}

#[test]
fn stats_rereads_run_directories() {
    let fx = sim_fixture(serde_json::json!({"kind": "sim_retrieval"}));
    ok(&["run", "--config", s(&fx.config), "--out-dir", s(&fx.out)]);
    let dir = fx.out.join("syn");
    let first = fs::read_to_string(dir.join("report.csv")).unwrap();
    let table = ok(&["-v", "stats", "--dir", s(&dir)]);
    assert!(
        table.contains("run 0:") && table.contains("run 1:"),
        "{table}"
    );
    assert_eq!(fs::read_to_string(dir.join("report.csv")).unwrap(), first);
}

#[test]
fn run_is_deterministic() {
    let fx = sim_fixture(serde_json::json!({"kind": "sim_in_context"}));
    let a = fx.out.join("a");
    let b = fx.out.join("b");
    ok(&["run", "--config", s(&fx.config), "--out-dir", s(&a)]);
    ok(&["run", "--config", s(&fx.config), "--out-dir", s(&b)]);
    let read = |root: &Path| fs::read(root.join("syn/0/results.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn unreachable_endpoint_aborts_as_partial_run() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let fx = sim_fixture(serde_json::json!({
        "kind": "http",
        "endpoint_url": format!("http://127.0.0.1:{port}/v1/completions"),
        "retries": 0,
        "timeout_ms": 2000,
    }));
    let out = run(&[
        "run",
        "--config",
        s(&fx.config),
        "--runs",
        "1",
        "--out-dir",
        s(&fx.out),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // the partial results file is kept for inspection
    assert!(fx.out.join("syn/0/results.jsonl").is_file());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = run(&["run", "--vocab", s(&dir.path().join("nope.json"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("paths.vocab"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"cipher": {"r": 0.5, "typo": true}}"#).unwrap();
    let bad = run(&["run", "--config", s(&cfg)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cipher"));

    assert_eq!(run(&["run", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["run", "--help"]).status.code(), Some(0));
}

#[test]
fn sample_and_prompt_build_write_files() {
    let fx = sim_fixture(serde_json::json!({"kind": "sim_in_context"}));
    let dir = fx.out.clone();
    let samples = dir.join("samples.jsonl");
    ok(&["sample", "--config", s(&fx.config), "--out", s(&samples)]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&samples)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 60);
    assert!(lines
        .iter()
        .all(|l| l["demo_ids"].as_array().unwrap().len() == 8));

    let prompts = dir.join("prompts");
    ok(&[
        "prompt",
        "build",
        "--config",
        s(&fx.config),
        "--limit",
        "2",
        "--out",
        s(&prompts),
    ]);
    for tag in ["plain", "bij", "nonbij"] {
        let p = fs::read_to_string(prompts.join(format!("t0.{tag}.txt"))).unwrap();
        assert!(p.starts_with("Input: "));
        assert!(p.ends_with("\nOutput:"));
        assert_eq!(p.matches("Output: ").count(), 8);
    }
}

#[test]
fn sim_demo_reports_both_learners() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&[
        "sim",
        "demo",
        "--r",
        "0.5",
        "--n",
        "20",
        "--out",
        s(dir.path()),
    ]);
    assert!(stdout.contains("sim_retrieval") && stdout.contains("sim_in_context"));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "sim_retrieval");
    assert_eq!(rows[0][5], "+0.00");
    let in_context_gap: f64 = rows[1][5].parse().unwrap();
    assert!(in_context_gap > 0.0, "{csv}");
}

#[test]
fn probe_analyze_writes_chunk_means() {
    let dir = TempDir::new().unwrap();
    let records = dir.path().join("records.jsonl");
    let mut text = String::new();
    for occ in 1..=15u32 {
        text.push_str(&format!(
            "{{\"prompt_id\":\"p\",\"layer\":0,\"position\":{},\"occurrence\":{occ},\"orig_id\":5,\"sub_id\":6,\"orig_rank\":{},\"sub_rank\":1}}\n",
            occ * 4,
            occ + 1
        ));
    }
    fs::write(&records, text).unwrap();
    let out = dir.path().join("probe");
    let stdout = ok(&[
        "probe",
        "analyze",
        "--records",
        s(&records),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        stdout,
        "chunk,mean_diff\n1-3,2\n4-6,5\n7-9,8\n10-12,11\n13-15,14\n"
    );
    assert!(out.join("heatmap.csv").is_file());
}

fn random_ascii(r: &mut impl Rng) -> String {
    let len = r.random_range(0..40);
    (0..len)
        .map(|_| {
            if r.random_bool(0.2) {
                ' '
            } else {
                r.random_range(0x21u8..0x7f) as char
            }
        })
        .collect()
}

#[test]
fn served_tokenizer_matches_builtin_over_the_bridge() {
    let dir = TempDir::new().unwrap();
    let (_, vocab_path, _) = text_fixture(dir.path());
    let cmd = format!(
        "{} tokenizer serve --vocab {}",
        env!("CARGO_BIN_EXE_iclcb"),
        s(&vocab_path)
    );
    let vocab = Vocabulary::load(&vocab_path).unwrap();
    let bridged = TokenizerSpec::bridge(vocab.clone(), &cmd).unwrap();
    let builtin = TokenizerSpec::builtin(vocab);
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut cases: Vec<String> = TEXT.lines().map(str::to_string).collect();
    cases.extend((0..300).map(|_| random_ascii(&mut r)));
    for text in &cases {
        let ids = bridged.encode(text).unwrap();
        assert_eq!(ids, builtin.encode(text).unwrap(), "{text:?}");
        assert_eq!(bridged.decode(&ids).unwrap(), builtin.decode(&ids).unwrap());
    }
}

#[test]
fn tokenizer_server_survives_protocol_errors() {
    let dir = TempDir::new().unwrap();
    let (_, vocab, _) = text_fixture(dir.path());
    let mut child = bin()
        .args(["tokenizer", "serve", "--vocab", s(&vocab)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut ask = |req: &str| {
        writeln!(stdin, "{req}").unwrap();
        stdin.flush().unwrap();
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        line
    };
    assert!(ask("BOGUS 1").starts_with("ERR "));
    assert!(ask("ENC not-json").starts_with("ERR "));
    assert!(ask("DEC 1 x").starts_with("ERR "));
    assert!(ask("SURF 999999").starts_with("ERR "));
    assert!(ask("ENC \"the film\"").starts_with("IDS "));
    drop(stdin);
    assert!(child.wait().unwrap().success());
}
