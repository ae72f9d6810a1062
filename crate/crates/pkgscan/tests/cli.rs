use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run_in(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pkgscan"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PKGSCAN_LOG")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = run_in(cwd, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

#[test]
fn scan_single_package() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.jsonl");
    let demo = p(&fixtures().join("demo-0.1"));
    let stdout = ok(tmp.path(), &["scan", &demo, "--provider", "mock", "--out", &p(&report)]);
    assert_eq!(stdout, "demo-0.1\tbenign\t0\n");
    let lines = jsonl(&report);
    assert_eq!(lines.len(), 1);
    let r = &lines[0];
    assert_eq!(r["package"], "demo-0.1");
    assert_eq!(r["mode"], "zero_shot");
    assert_eq!(r["verdict"]["outcome"], "benign");
    let files: Vec<&str> = r["files"].as_array().unwrap().iter().map(|f| f["rel_path"].as_str().unwrap()).collect();
    assert_eq!(files, ["README.md", "pkg/__init__.py", "setup.py"]);
}

#[test]
fn missing_target_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["scan", "does-not-exist"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does-not-exist"));
    let out = run_in(tmp.path(), &["scan", ".", "--set", "scan.mode=bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dotted_flags_reach_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let demo = p(&fixtures().join("demo-0.1"));
    let out = run_in(tmp.path(), &["scan", &demo, "--scan.mode=crag"]);
    // crag without any collection is a configuration error
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_configuration_keys() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["scan", "--help"][..], &["kb", "build", "--help"], &["evaluate", "--help"]] {
        let text = ok(tmp.path(), args);
        for key in ["seed", "scan.mode", "crag.threshold", "provider.kind"] {
            assert!(text.contains(key), "{args:?} help lacks {key}");
        }
    }
}

#[test]
fn kb_build_and_query() {
    let tmp = tempfile::tempdir().unwrap();
    let rules = p(&fixtures().join("yara/rules.yar"));
    let coll = tmp.path().join("rules.collection.jsonl");
    assert_eq!(ok(tmp.path(), &["kb", "build", "--source", "yara", &rules, "--out", &p(&coll)]), "3\n");
    let lines = jsonl(&coll);
    assert_eq!(lines[0]["count"], 3);
    assert_eq!(lines.len(), 4);
    let hits = ok(tmp.path(), &["kb", "query", "--collection", &p(&coll), "-k", "2", "base64 decode exec payload"]);
    let lines: Vec<&str> = hits.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("1\t") && lines[1].starts_with("2\t"));
    let score = |l: &str| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(score(lines[0]) >= score(lines[1]));

    let forge = p(&fixtures().join("yara/forge.yar"));
    let out = tmp.path().join("forge.jsonl");
    assert_eq!(ok(tmp.path(), &["kb", "build", "--source", "yara", &forge, "--out", &p(&out), "--name", "forge"]), "25\n");
}

#[test]
fn crag_scan_writes_retrieval_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let rules = p(&fixtures().join("yara/rules.yar"));
    let coll = tmp.path().join("yara.jsonl");
    ok(tmp.path(), &["kb", "build", "--source", "yara", &rules, "--out", &p(&coll)]);
    let demo = p(&fixtures().join("demo-0.1"));
    let report = tmp.path().join("crag.jsonl");
    ok(
        tmp.path(),
        &["scan", &demo, "--mode", "crag", "--kb", &p(&coll), "--set", "crag.threshold=0", "--out", &p(&report)],
    );
    let r = &jsonl(&report)[0];
    assert_eq!(r["mode"], "crag");
    let audit = jsonl(&tmp.path().join("crag.retrieval.jsonl"));
    assert!(!audit.is_empty() && audit.len() <= 3);
    for a in &audit {
        assert_eq!(a["package"], "demo-0.1");
        assert_eq!(a["collection"], "yara");
        assert_eq!(a["admitted"], true);
    }
}

#[test]
fn dataset_prepare_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = p(&fixtures().join("corpus"));
    let stdout = ok(tmp.path(), &["dataset", "prepare", "--corpus", &corpus, "--out", "a", "--seed", "7"]);
    assert_eq!(stdout, "train 16 val 2 test 2\n");
    ok(tmp.path(), &["dataset", "prepare", "--corpus", &corpus, "--out", "b", "--seed", "7", "--jobs", "1"]);
    for f in ["train.csv", "val.csv", "test.csv", "manifest.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let train = fs::read_to_string(tmp.path().join("a/train.csv")).unwrap();
    assert!(train.starts_with("description,label\n\"start entry "));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["counts"]["total"], 20);

    ok(tmp.path(), &["dataset", "prepare", "--corpus", &corpus, "--out", "c", "--seed", "8"]);
    let all = |d: &str| {
        let mut rows: Vec<String> = ["train.csv", "val.csv", "test.csv"]
            .iter()
            .flat_map(|f| fs::read_to_string(tmp.path().join(d).join(f)).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>())
            .collect();
        rows.sort();
        rows
    };
    assert_eq!(all("a"), all("c"));
    assert_ne!(fs::read(tmp.path().join("a/train.csv")).unwrap(), fs::read(tmp.path().join("c/train.csv")).unwrap());
}

#[test]
fn evaluate_matches_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = fixtures().join("corpus");
    let report = tmp.path().join("report.json");
    let stdout = ok(&corpus, &["evaluate", "--corpus", ".", "--config", "pkgscan.toml", "--out", &p(&report)]);
    assert!(stdout.contains("zero_shot/rule"));
    let got: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let want: Value = serde_json::from_str(&fs::read_to_string(fixtures().join("expected_report.json")).unwrap()).unwrap();
    assert_eq!(got, want);
    let samples = jsonl(&tmp.path().join("report.samples.jsonl"));
    assert_eq!(samples.len(), 20);
    let fp: Vec<&str> = samples
        .iter()
        .filter(|s| s["label"] == 0 && s["prediction"] == "malicious")
        .map(|s| s["package"].as_str().unwrap())
        .collect();
    assert_eq!(fp, ["docs-builder-1.0"]);
    assert_eq!(jsonl(&tmp.path().join("report.scan.jsonl")).len(), 20);
}

#[test]
fn evaluate_predictions_and_render() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("ft.csv"), "package,label,prediction\na,1,malicious\nb,0,benign\nc,1,benign\nd,0,benign\n").unwrap();
    ok(tmp.path(), &["evaluate", "--predictions", "ft.csv", "--out", "ft.json", "--name", "fine-tuned"]);
    let corpus = fixtures().join("corpus");
    let zs = tmp.path().join("zs.json");
    ok(&corpus, &["evaluate", "--corpus", ".", "--config", "pkgscan.toml", "--out", &p(&zs)]);
    let table = ok(tmp.path(), &["report", "render", "zs.json", "ft.json"]);
    let lines: Vec<&str> = table.lines().collect();
    let accuracy_row = |name: &str| *lines.iter().rev().find(|l| l.contains(name)).unwrap_or_else(|| panic!("{name} row in\n{table}"));
    assert!(accuracy_row("fine-tuned").contains("| 0.75 "), "{table}");
    assert!(accuracy_row("zero_shot/rule").contains("| 0.90 "), "{table}");
    ok(tmp.path(), &["report", "render", "zs.json", "ft.json", "--out", "table.txt"]);
    assert_eq!(fs::read_to_string(tmp.path().join("table.txt")).unwrap().trim_end(), table.trim_end());
    assert_eq!(run_in(tmp.path(), &["report", "render", "missing.json"]).status.code(), Some(2));
}
