//! End-to-end runs of the `adapter-soup` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn run(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapter-soup"))
        .args(args)
        .env("ADAPTER_SOUP_WORKSPACE", ws)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    stdout(&o)
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// A desk workspace with corpora, a base model and one adapter per
/// training domain, built once for the tests that need it.
fn trained() -> &'static Path {
    static WS: OnceLock<TempDir> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(run(dir.path(), &["prepare"]));
        ok(run(dir.path(), &["train", "--domains", "all"]));
        dir
    })
    .path()
}

fn registry_ids(ws: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(ws.join("registry.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["id"].as_str().unwrap().to_string(), v["domain"].as_str().unwrap().to_string())
        })
        .collect()
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(tmp.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(run(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["soup", "--novel", "x", "--method", "magic"]).status.code(), Some(1));
    let o = run(tmp.path(), &["prepare", "--set", "data.bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
    assert_eq!(run(tmp.path(), &["prepare", "--set", "novalue"]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["prepare", "--set", "workspace.workers=0"]).status.code(), Some(1));
}

#[test]
fn missing_prerequisites_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prepare"), "{}", stderr(&o));
    ok(run(tmp.path(), &["prepare"]));
    let o = run(tmp.path(), &["eval", "--suite", "cross-domain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
    let o = run(tmp.path(), &["report"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_raw_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("no-such-raw");
    let set = format!("data.raw_dir={:?}", raw.display().to_string());
    let o = run(tmp.path(), &["prepare", "--set", "data.mode=\"ingest\"", "--set", &set]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("no-such-raw"), "{}", stderr(&o));
}

#[test]
fn ingest_mode_reads_text_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let words = [
        ["the river bank flooded after heavy rain", "boats drifted past the old mill"],
        ["the compiler rejected the borrowed value", "a trait object needs a vtable"],
        ["the oven was preheated for the bread", "knead the dough until it is smooth"],
    ];
    for (d, lines) in ["alpha", "beta", "gamma"].iter().zip(words) {
        std::fs::create_dir_all(raw.join(d)).unwrap();
        for i in 0..40 {
            let text = format!("{} {i}.\n{} {i}.\n", lines[0], lines[1]);
            std::fs::write(raw.join(d).join(format!("doc{i:02}.txt")), text).unwrap();
        }
    }
    let set = format!("data.raw_dir={:?}", raw.display().to_string());
    let out = ok(run(
        tmp.path(),
        &["prepare", "--set", "data.mode=\"ingest\"", "--set", &set, "--set", "data.novel_domains=[\"gamma\"]", "--set", "data.vocab=300"],
    ));
    assert!(out.contains("alpha") && out.contains("beta") && out.contains("gamma"), "{out}");
    let m = read_json(&tmp.path().join("corpora/manifest.json"));
    let roles: Vec<(String, String)> = m["domains"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| (d["name"].as_str().unwrap().into(), d["role"].as_str().unwrap().into()))
        .collect();
    assert_eq!(
        roles,
        vec![
            ("alpha".into(), "training".into()),
            ("beta".into(), "training".into()),
            ("gamma".into(), "novel".into())
        ]
    );
}

fn snapshot_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![(root.join("tokenizer.bin"), std::fs::read(root.join("tokenizer.bin")).unwrap())];
    for e in walk(&root.join("corpora")) {
        let bytes = std::fs::read(&e).unwrap();
        out.push((e, bytes));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn prepare_is_idempotent_and_layout_is_fixed() {
    let tmp = tempfile::tempdir().unwrap();
    let first = ok(run(tmp.path(), &["prepare"]));
    assert_eq!(first.lines().filter(|l| l.contains(" training ")).count(), 8);
    assert_eq!(first.lines().filter(|l| l.contains(" novel ")).count(), 3);
    for d in ["domain0", "domain7", "novel2"] {
        for s in ["train", "heldout", "test"] {
            assert!(tmp.path().join(format!("corpora/{d}/{s}.bin")).is_file(), "{d}/{s}");
        }
    }
    let before = snapshot_files(tmp.path());
    let second = ok(run(tmp.path(), &["prepare"]));
    assert!(second.contains("up to date"), "{second}");
    assert_eq!(snapshot_files(tmp.path()), before);
}

#[test]
fn config_precedence_and_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, "[data]\nseed = 5\nvocab = 400\n\n[train]\nlr = 0.02\n").unwrap();
    let a = tmp.path().join("a");
    let cfg_arg = cfg.display().to_string();
    ok(run(&a, &["--config", &cfg_arg, "--set", "data.seed=7", "prepare"]));
    let snap = std::fs::read_to_string(a.join("runs/prepare.toml")).unwrap();
    let v: toml::Table = toml::from_str(&snap).unwrap();
    assert_eq!(v["data"]["seed"].as_integer(), Some(7));
    assert_eq!(v["data"]["vocab"].as_integer(), Some(400));
    assert_eq!(v["train"]["lr"].as_float(), Some(0.02));
    assert_eq!(v["model"]["layers"].as_integer(), Some(2));

    // the snapshot alone reproduces the run
    let b = tmp.path().join("b");
    let snap_arg = a.join("runs/prepare.toml").display().to_string();
    let b_arg = b.display().to_string();
    ok(run(&b, &["--config", &snap_arg, "--workspace", &b_arg, "prepare"]));
    assert_eq!(
        std::fs::read(a.join("corpora/manifest.json")).unwrap(),
        std::fs::read(b.join("corpora/manifest.json")).unwrap()
    );
}

#[test]
fn sweep_enumeration_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(run(tmp.path(), &["eval", "--suite", "single_domain", "--grid", "reference", "--dry-run"]));
    assert!(out.contains("15 checkpoints -> 455 recipes"), "{out}");
    let out = ok(run(tmp.path(), &["eval", "--suite", "single-domain", "--dry-run"]));
    assert!(out.contains("9 checkpoints -> 84 recipes"), "{out}");
    assert!(!tmp.path().join("corpora").exists());
}

#[test]
fn cost_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(run(tmp.path(), &["cost", "--layers", "12", "--d-model", "768", "--bottleneck", "64", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["adapter_inference"], 2_359_296);
    assert_eq!(v["train_ratio"], serde_json::json!([8, 1]));
    assert_eq!(v["inference_ratio"], serde_json::json!([16, 1]));
    let text = ok(run(tmp.path(), &["cost", "--t", "4"]));
    assert!(text.contains("ratio") && text.contains(" 4 ") && text.contains(" 8"), "{text}");
    assert_eq!(run(tmp.path(), &["cost", "--t", "0"]).status.code(), Some(1));
}

#[test]
fn retraining_is_cached() {
    let ws = trained();
    let before = std::fs::read(ws.join("registry.jsonl")).unwrap();
    let out = ok(run(ws, &["train", "--domains", "all"]));
    assert_eq!(out.lines().filter(|l| l.starts_with("cached")).count(), 8, "{out}");
    assert!(!out.contains("trained "), "{out}");
    assert_eq!(std::fs::read(ws.join("registry.jsonl")).unwrap(), before);
    for (id, domain) in registry_ids(ws) {
        let alias = ws.join(format!("adapters/by-name/{domain}_lr3e-3_seed0.ckpt"));
        assert_eq!(std::fs::read_link(&alias).unwrap(), PathBuf::from(format!("../{id}.ckpt")));
    }
}

#[test]
fn manual_soup_uses_exactly_the_given_ids() {
    let ws = trained();
    let ids: Vec<String> = registry_ids(ws).into_iter().map(|(id, _)| id).take(3).collect();
    let prefixes: Vec<&str> = ids.iter().map(|id| &id[..10]).collect();
    ok(run(ws, &["soup", "--novel", "novel1", "--method", "manual", "--ids", &prefixes.join(",")]));
    let recipe = read_json(&ws.join("soups/novel1/manual/recipe.json"));
    let mut members: Vec<String> = recipe["members"].as_array().unwrap().iter().map(|m| m.as_str().unwrap().into()).collect();
    members.sort();
    let mut want = ids.clone();
    want.sort();
    assert_eq!(members, want);
    let coeffs: Vec<f64> = recipe["coefficients"].as_array().unwrap().iter().map(|c| c.as_f64().unwrap()).collect();
    assert_eq!(coeffs.len(), 3);
    assert!(coeffs.iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
    assert!(ws.join("soups/novel1/manual/soup.ckpt").is_file());

    let o = run(ws, &["soup", "--novel", "novel1", "--method", "manual", "--ids", "zzzz"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(ws, &["soup", "--novel", "novel1", "--method", "manual"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn uniform_soup_covers_every_domain() {
    let ws = trained();
    ok(run(ws, &["soup", "--novel", "novel2", "--method", "uniform"]));
    let recipe = read_json(&ws.join("soups/novel2/uniform/recipe.json"));
    assert_eq!(recipe["members"].as_array().unwrap().len(), 8);
}

#[test]
fn cluster_soup_on_a_cloned_domain_selects_its_source() {
    let ws = trained();
    let src = ws.join("corpora/domain3");
    let dst = ws.join("corpora/clone3");
    std::fs::create_dir_all(&dst).unwrap();
    for f in ["train.bin", "heldout.bin", "test.bin"] {
        std::fs::copy(src.join(f), dst.join(f)).unwrap();
    }
    let out = ok(run(ws, &["soup", "--novel", "clone3", "--method", "cluster"]));
    assert!(out.contains("domain3"), "{out}");
    let sel = read_json(&ws.join("soups/clone3/cluster/selection.json"));
    let chosen: Vec<&str> = sel["chosen"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert!(chosen.contains(&"domain3"), "{chosen:?}");
    let source_id = registry_ids(ws).into_iter().find(|(_, d)| d == "domain3").unwrap().0;
    let recipe = read_json(&ws.join("soups/clone3/cluster/recipe.json"));
    assert!(recipe["members"].as_array().unwrap().iter().any(|m| m == &serde_json::json!(source_id)));
}

#[test]
fn select_and_cell_evaluation() {
    let ws = trained();
    let out = ok(run(ws, &["select", "--novel", "novel0"]));
    assert!(out.contains("cosine selection") && out.contains("cluster selection"), "{out}");
    let sel = read_json(&ws.join("selections/novel0.json"));
    assert_eq!(sel["cosine"]["ranked"].as_array().unwrap().len(), 8);

    let out = ok(run(ws, &["eval", "--suite", "cell", "--method", "zero-shot", "--domain", "novel1"]));
    let ppl: f64 = out.trim().parse().unwrap();
    assert!(ppl > 1.0 && ppl < 512.0, "{ppl}");
    let o = run(ws, &["eval", "--suite", "cell", "--method", "zero-shot"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(ws, &["eval", "--suite", "cell", "--method", "best-guess", "--domain", "novel1"]);
    assert_eq!(o.status.code(), Some(1));
}
