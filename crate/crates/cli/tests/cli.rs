use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_anchorchain");

fn cli(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ANCHORCHAIN_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A synthetic set plus its ingested index.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    qa: PathBuf,
    index: PathBuf,
}

fn fixture(n_queries: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let syn = root.join("syn");
    let index = root.join("index");
    ok(&[
        "synth",
        "--out",
        s(&syn),
        "--n-queries",
        &n_queries.to_string(),
        "--seed",
        "7",
    ]);
    ok(&["ingest", "--corpus", s(&syn.join("corpus.jsonl")), "--out", s(&index)]);
    Fixture {
        _dir: dir,
        qa: syn.join("qa.jsonl"),
        root,
        index,
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn oracle_run_then_eval_passes_every_query() {
    let f = fixture(12);
    let out = f.root.join("run");
    ok(&["run", "--qa", s(&f.qa), "--index", s(&f.index), "--out", s(&out)]);
    let text = ok(&[
        "eval",
        "--traces",
        s(&out.join("traces.jsonl")),
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
    ]);
    assert!(text.contains("all_pass"));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["n_queries"], 12);
    assert_eq!(report["aggregates"]["all_pass"], 1.0);
    assert_eq!(report["aggregates"]["correct"], 1.0);
    assert_eq!(lines(&out.join("per_query.jsonl")).len(), 12);

    // Evaluating in the run directory extends the run's manifest.
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "run");
    for name in ["traces", "per_query", "report", "manifest"] {
        let rel = manifest["artifacts"][name].as_str().unwrap();
        assert!(out.join(rel).is_file(), "artifact {name} missing");
    }
    assert_eq!(manifest["counts"]["n_queries"], 12);
    assert_eq!(manifest["backend_id"], "oracle");
}

#[test]
fn ingest_reports_malformed_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    fs::write(
        &corpus,
        "{\"doc_id\":\"a\",\"title\":\"A\",\"text\":\"x\"}\n{\"doc_id\":\"b\",\"title\":\"B\",\"text\":\"y\"}\n{\"doc_id\": oops}\n",
    )
    .unwrap();
    let out = cli(&["ingest", "--corpus", s(&corpus), "--out", s(&dir.path().join("idx"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn reingesting_unchanged_corpus_gives_identical_index() {
    let f = fixture(6);
    let again = f.root.join("index2");
    ok(&[
        "ingest",
        "--corpus",
        s(&f.root.join("syn/corpus.jsonl")),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(f.index.join("chunks.jsonl")).unwrap(),
        fs::read(again.join("chunks.jsonl")).unwrap()
    );
    assert_eq!(
        read_json(&f.index.join("stats.json"))["digest"],
        read_json(&again.join("stats.json"))["digest"]
    );
}

#[test]
fn direct_variant_makes_one_completion_per_query() {
    let f = fixture(3);
    let out = f.root.join("direct");
    ok(&[
        "run",
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&out),
        "--variant",
        "direct",
    ]);
    let traces = lines(&out.join("traces.jsonl"));
    assert_eq!(traces.len(), 3);
    let calls: usize = traces
        .iter()
        .map(|t| t["completion_transcript"].as_array().map_or(0, Vec::len))
        .sum();
    assert_eq!(calls, 3);
}

#[test]
fn trace_file_is_identical_across_reruns_and_parallelism() {
    let f = fixture(12);
    let a = f.root.join("a");
    let b = f.root.join("b");
    ok(&["run", "--qa", s(&f.qa), "--index", s(&f.index), "--out", s(&a)]);
    ok(&[
        "run",
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&b),
        "--parallelism",
        "4",
    ]);
    assert_eq!(
        fs::read(a.join("traces.jsonl")).unwrap(),
        fs::read(b.join("traces.jsonl")).unwrap()
    );
}

#[test]
fn resume_executes_only_missing_queries() {
    let f = fixture(10);
    let out = f.root.join("run");
    ok(&["run", "--qa", s(&f.qa), "--index", s(&f.index), "--out", s(&out)]);
    let traces = out.join("traces.jsonl");
    let full = fs::read_to_string(&traces).unwrap();
    let kept: String = full.lines().take(4).map(|l| format!("{l}\n")).collect();
    // Half-written last line from an interrupted run.
    fs::write(&traces, format!("{kept}{{\"trace_version\":1,\"qid\":")).unwrap();
    let text = ok(&[
        "run",
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&out),
        "--resume",
    ]);
    assert!(text.contains("6 computed, 4 resumed"), "{text}");
    assert_eq!(fs::read_to_string(&traces).unwrap(), full);
}

#[test]
fn judges_share_one_file_schema() {
    let f = fixture(6);
    let out = f.root.join("run");
    ok(&["run", "--qa", s(&f.qa), "--index", s(&f.index), "--out", s(&out)]);
    let traces = out.join("traces.jsonl");
    let exact = f.root.join("exact");
    let oracle = f.root.join("oracle");
    ok(&[
        "eval",
        "--traces",
        s(&traces),
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&exact),
        "--judge",
        "exact",
    ]);
    ok(&[
        "eval",
        "--traces",
        s(&traces),
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&oracle),
        "--judge",
        "oracle",
    ]);
    let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(
        keys(&read_json(&exact.join("report.json"))),
        keys(&read_json(&oracle.join("report.json")))
    );
    let (a, b) = (
        lines(&exact.join("per_query.jsonl")),
        lines(&oracle.join("per_query.jsonl")),
    );
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(keys(x), keys(y));
    }
    assert_eq!(read_json(&exact.join("manifest.json"))["command"], "eval");
}

#[test]
fn eval_lists_missing_qids() {
    let f = fixture(4);
    let out = f.root.join("run");
    ok(&["run", "--qa", s(&f.qa), "--index", s(&f.index), "--out", s(&out)]);
    let traces = out.join("traces.jsonl");
    let body = fs::read_to_string(&traces).unwrap();
    let kept: Vec<&str> = body.lines().take(2).collect();
    fs::write(&traces, kept.join("\n") + "\n").unwrap();
    let res = cli(&["eval", "--traces", s(&traces), "--qa", s(&f.qa), "--index", s(&f.index)]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("syn-0002") && err.contains("syn-0003"), "{err}");
}

#[test]
fn ablation_cells_match_independent_runs() {
    let f = fixture(9);
    let out = f.root.join("abl");
    let text = ok(&[
        "ablate",
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&out),
        "--variants",
        "anchor_chain,iterative_chain_only",
        "--steps",
        "1,3",
    ]);
    assert!(text.contains("steps=3"));
    let table = read_json(&out.join("table.json"));
    assert_eq!(table["cells"].as_array().unwrap().len(), 4);
    assert!(out.join("table.txt").is_file());
    let manifest = read_json(&out.join("manifest.json"));
    let artifacts = manifest["artifacts"].as_object().unwrap();
    assert_eq!(artifacts.keys().filter(|k| k.ends_with("/traces")).count(), 4);
    for rel in artifacts.values() {
        assert!(out.join(rel.as_str().unwrap()).is_file(), "{rel}");
    }

    let single = f.root.join("single");
    ok(&[
        "run",
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&single),
        "--variant",
        "iterative_chain_only",
        "--steps",
        "3",
    ]);
    ok(&[
        "eval",
        "--traces",
        s(&single.join("traces.jsonl")),
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
    ]);
    let cell = out.join("iterative_chain_only-steps3");
    assert_eq!(
        read_json(&cell.join("report.json")),
        read_json(&single.join("report.json"))
    );
    assert_eq!(
        fs::read(cell.join("per_query.jsonl")).unwrap(),
        fs::read(single.join("per_query.jsonl")).unwrap()
    );

    let rendered = ok(&["report", s(&out)]);
    assert_eq!(rendered, fs::read_to_string(out.join("table.txt")).unwrap());
}

#[test]
fn manifest_alone_reexecutes_the_run() {
    let f = fixture(8);
    let out = f.root.join("run");
    ok(&[
        "run",
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&out),
        "--variant",
        "coverage_anchor_only",
        "--steps",
        "3",
    ]);
    let original = fs::read(out.join("traces.jsonl")).unwrap();
    let kept = f.root.join("kept.json");
    fs::rename(out.join("manifest.json"), &kept).unwrap();
    fs::remove_dir_all(&out).unwrap();
    fs::create_dir_all(&out).unwrap();
    fs::rename(&kept, out.join("manifest.json")).unwrap();

    ok(&["run", "--manifest", s(&out.join("manifest.json"))]);
    assert_eq!(fs::read(out.join("traces.jsonl")).unwrap(), original);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["config"]["pipeline"]["variant"], "coverage_anchor_only");
    assert_eq!(m["config"]["pipeline"]["m"], 3);
}

#[test]
fn manifest_rerun_rejects_changed_dataset() {
    let f = fixture(4);
    let out = f.root.join("run");
    ok(&["run", "--qa", s(&f.qa), "--index", s(&f.index), "--out", s(&out)]);
    let mut qa = fs::read_to_string(&f.qa).unwrap();
    qa.push('\n');
    fs::write(&f.qa, qa).unwrap();
    let res = cli(&["run", "--manifest", s(&out.join("manifest.json"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("changed"));
}

#[test]
fn api_key_never_reaches_disk() {
    let f = fixture(3);
    let out = f.root.join("remote");
    let cfg = f.root.join("remote.toml");
    fs::write(
        &cfg,
        "[backend]\nkind = \"remote\"\n[remote]\nbase_url = \"http://127.0.0.1:9/v1\"\nmax_attempts = 1\ntimeout_secs = 2\n",
    )
    .unwrap();
    let key = "sk-never-persist-0123456789";
    let res = Command::new(BIN)
        .args([
            "run",
            "--qa",
            s(&f.qa),
            "--index",
            s(&f.index),
            "--out",
            s(&out),
            "--config",
            s(&cfg),
        ])
        .args(["--cache-dir", s(&out.join("cache"))])
        .env("ANCHORCHAIN_API_KEY", key)
        .output()
        .unwrap();
    // Every query fails against the closed port, so this is a backend failure.
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(!String::from_utf8_lossy(&res.stdout).contains(key));
    assert!(!String::from_utf8_lossy(&res.stderr).contains(key));
    let mut files = 0;
    let mut stack = vec![f.root.clone()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files += 1;
                let bytes = fs::read(&p).unwrap();
                assert!(
                    !bytes.windows(key.len()).any(|w| w == key.as_bytes()),
                    "{}",
                    p.display()
                );
            }
        }
    }
    assert!(files > 0);
    assert_eq!(read_json(&out.join("manifest.json"))["counts"]["errored"], 3);
}

#[test]
fn remote_backend_without_key_is_a_backend_error() {
    let f = fixture(2);
    let res = cli(&[
        "run",
        "--qa",
        s(&f.qa),
        "--index",
        s(&f.index),
        "--out",
        s(&f.root.join("r")),
        "--backend",
        "remote",
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("ANCHORCHAIN_API_KEY"));
}

#[test]
fn usage_errors_exit_with_one() {
    let f = fixture(2);
    let r = f.root.join("r");
    let base = ["run", "--qa", s(&f.qa), "--index", s(&f.index), "--out", s(&r)];
    let bad_variant = cli(&[&base[..], &["--variant", "best_one"]].concat());
    assert_eq!(bad_variant.status.code(), Some(1));
    let zero = cli(&[&base[..], &["--steps", "0"]].concat());
    assert_eq!(zero.status.code(), Some(1));
    let cfg = f.root.join("bad.toml");
    fs::write(&cfg, "[pipeline\n").unwrap();
    let bad_toml = cli(&[&base[..], &["--config", s(&cfg)]].concat());
    assert_eq!(bad_toml.status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let res = cli(&[
        "run",
        "--qa",
        s(&missing),
        "--index",
        s(dir.path()),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(cli(&["report", s(dir.path())]).status.code(), Some(2));
}
