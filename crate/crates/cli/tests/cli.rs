use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use serde_json::Value;
use slics::io::{read_checkpoint, write_matrix, Dataset, Dtype};
use slics::learn::svd_init;

fn slics(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slics"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SLICS_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = slics(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut a = args.to_vec();
    a.extend(["--format", "json"]);
    serde_json::from_str(&ok(&a)).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Planted dataset: 4 concepts, 3 atoms each, 600 items.
fn dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "synth", "--out", s(&out), "--items", "600", "--concepts", "4", "--dim", "32", "--atoms", "3",
        "--noise", "0.01", "--tokens", "4",
    ]);
    out.join("manifest.json")
}

fn fit(manifest: &Path, ck: &Path, extra: &[&str]) -> Value {
    let mut a = vec!["fit", "--manifest", s(manifest), "--checkpoint", s(ck), "--d0", "3"];
    a.extend(extra);
    json(&a)
}

#[test]
fn missing_label_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let labels = dir.path().join("data/labels.csv");
    std::fs::remove_file(&labels).unwrap();
    let out = slics(&["fit", "--manifest", s(&m), "--checkpoint", s(&dir.path().join("ck"))]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("labels.csv"));
    assert_eq!(err["error"]["path"], s(&labels));
}

#[test]
fn malformed_input_and_bad_usage_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    std::fs::write(dir.path().join("data/labels.csv"), "a,b\n1,7\n").unwrap();
    let out = slics(&["fit", "--manifest", s(&m), "--checkpoint", s(&dir.path().join("ck"))]);
    // content hash of the label file no longer matches
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "hash_mismatch");

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nd0 = \"many\"\n").unwrap();
    let out = slics(&["--config", s(&cfg), "bench"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.toml"));
}

#[test]
fn same_inputs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let args = ["--iterations", "3", "--batch-size", "100", "--seed", "11"];
    let a = fit(&m, &dir.path().join("a"), &args);
    let b = fit(&m, &dir.path().join("b"), &args);
    assert_eq!(a["rows"][0]["dictionary_sha256"], b["rows"][0]["dictionary_sha256"]);
    assert_eq!(a["rows"][0]["coefficients_sha256"], b["rows"][0]["coefficients_sha256"]);
    for f in ["checkpoint.json", "report.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(a["seed"], 11);
    let c = fit(&m, &dir.path().join("c"), &["--iterations", "3", "--batch-size", "100", "--seed", "12"]);
    assert_ne!(a["rows"][0]["dictionary_sha256"], c["rows"][0]["dictionary_sha256"]);
    assert_ne!(a["config_hash"], c["config_hash"]);
}

#[test]
fn zero_iterations_is_the_svd_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let ck = dir.path().join("ck");
    fit(&m, &ck, &["--iterations", "0"]);
    let saved = read_checkpoint(&ck).unwrap();
    let ds = Dataset::load(&m).unwrap();
    let (x, labels, _) = ds.subset(&ds.train_indices());
    let init = svd_init(&x, &labels, &[3; 4]).unwrap();
    assert_eq!(saved.dictionary, init.dictionary);
    let report: Value = serde_json::from_slice(&std::fs::read(ck.join("report.json")).unwrap()).unwrap();
    let stages = report["rows"].as_array().unwrap();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0]["kind"], "coefficients");
}

#[test]
fn resume_continues_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let straight = fit(&m, &dir.path().join("a"), &["--iterations", "4"]);
    let ck = dir.path().join("b");
    fit(&m, &ck, &["--iterations", "2"]);
    let resumed = fit(&m, &ck, &["--iterations", "2", "--resume"]);
    let (x, y) = (
        straight["rows"][0]["final_objective"].as_f64().unwrap(),
        resumed["rows"][0]["final_objective"].as_f64().unwrap(),
    );
    assert!((x - y).abs() <= 1e-12 * x, "{x} vs {y}");
}

#[test]
fn eval_emits_method_protocol_map_rows() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let ck = dir.path().join("ck");
    fit(&m, &ck, &["--iterations", "5"]);
    let csv = ok(&["eval", "--manifest", s(&m), "--checkpoint", s(&ck)]);
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("dataset,embedding,method,protocol,concept,k,mAP@k,"));
    assert!(header.ends_with(",config_hash,seed"));
    let v = json(&["eval", "--manifest", s(&m), "--checkpoint", s(&ck), "--k", "20"]);
    let overall = |method: &str, protocol: &str| {
        v["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["method"] == method && r["protocol"] == protocol && r["concept"] == "all")
            .map(|r| r["mAP@k"].as_f64().unwrap())
            .unwrap()
    };
    assert_eq!(v["rows"][0]["k"], 20);
    assert!(overall("filtered", "general") > overall("unfiltered", "general"));
    assert!(overall("filtered", "sub_label") > 0.0);
    // byte-identical on a rerun
    assert_eq!(csv, ok(&["eval", "--manifest", s(&m), "--checkpoint", s(&ck)]));
}

#[test]
fn cooccur_is_row_normalized_with_unit_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let ck = dir.path().join("ck");
    fit(&m, &ck, &["--iterations", "2"]);
    let v = json(&["cooccur", "--manifest", s(&m), "--checkpoint", s(&ck), "--max-atoms", "4"]);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    for r in rows {
        let atom = r["atom"].as_str().unwrap();
        assert_eq!(r[atom], 1.0);
        for (k, val) in r.as_object().unwrap() {
            if let Some(x) = val.as_f64() {
                assert!((0.0..=1.0).contains(&x), "{k} = {x}");
            }
        }
    }
}

#[test]
fn pseudolabel_rows_have_exactly_s_tilde_ones() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let out = dir.path().join("pseudo.csv");
    let csv = ok(&["pseudolabel", "--manifest", s(&m), "--s-tilde", "2", "--out", s(&out)]);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "item,concept0,concept1,concept2,concept3,config_hash,seed");
    let mut n = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1..5].iter().filter(|c| **c == "1").count(), 2, "{line}");
        n += 1;
    }
    assert_eq!(n, 600);
    assert!(out.exists());
    assert_eq!(slics(&["pseudolabel", "--manifest", s(&m)]).status.code(), Some(2));
}

#[test]
fn sweep_single_value_and_planted_rank() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let one = json(&["sweep-d0", "--manifest", s(&m), "--d0-min", "2", "--d0-max", "2", "--iterations", "2"]);
    assert_eq!(one["rows"].as_array().unwrap().len(), 1);
    assert_eq!(one["chosen_d0"], 2);
    assert_eq!(one["rows"][0]["chosen"], true);

    let v = json(&["sweep-d0", "--manifest", s(&m), "--d0-min", "1", "--d0-max", "7", "--iterations", "3"]);
    let chosen = v["chosen_d0"].as_u64().unwrap();
    assert!((1..=5).contains(&chosen), "planted rank 3, chose {chosen}");
    assert_eq!(v["rows"][0]["protocol"], "sub_label");
    assert_eq!(v["rows"][0]["fallback_general"], false);
}

#[test]
fn retrieve_caption_decompose_quantize() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let ck = dir.path().join("ck");
    fit(&m, &ck, &["--iterations", "5"]);

    let ds = Dataset::load(&m).unwrap();
    let q = ds.manifest.splits.query[0];
    let j = ds.labels.active(q)[0];
    let name = format!("concept{j}");
    let qs = q.to_string();
    let r = json(&["retrieve", "--manifest", s(&m), "--checkpoint", s(&ck), "--query", &qs, "--concept", &name, "--top-k", "10"]);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r["has_concept"] == true));
    assert!(rows.windows(2).all(|w| w[0]["score"].as_f64() >= w[1]["score"].as_f64()));
    let unfiltered = slics(&["retrieve", "--manifest", s(&m), "--query", &qs, "--concept", &name]);
    assert_eq!(unfiltered.status.code(), Some(2));

    // each concept's best words are its own atoms
    let c = json(&["caption", "--manifest", s(&m), "--checkpoint", s(&ck), "--top-n", "2"]);
    for row in c["rows"].as_array().unwrap() {
        let concept = row["concept"].as_str().unwrap();
        assert!(row["word"].as_str().unwrap().starts_with(&format!("{concept}_atom")), "{row}");
    }

    let d = json(&["decompose", "--manifest", s(&m), "--checkpoint", s(&ck), "--items", &qs]);
    let rows = d["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for row in rows {
        if row["active"] == false {
            assert_eq!(row["component_norm"], 0.0);
        }
    }

    let tm = dir.path().join("data/manifest_tokens.json");
    let pool = dir.path().join("pool.slcq");
    let v = json(&["quantize", "--manifest", s(&tm), "--out", s(&pool)]);
    assert_eq!(v["rows"][0]["items"], 120);
    assert!(pool.exists());
    let v = json(&["quantize", "--manifest", s(&tm), "--query", &qs, "--top-k", "3"]);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    assert_eq!(slics(&["quantize", "--manifest", s(&m)]).status.code(), Some(2));
}

#[test]
fn align_recovers_a_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let x = DMatrix::from_fn(3, 20, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
    let (c, s_) = (0.6f64, 0.8f64);
    let rot = DMatrix::from_row_slice(3, 3, &[c, -s_, 0.0, s_, c, 0.0, 0.0, 0.0, 1.0]);
    write_matrix(&dir.path().join("x.slcs"), &x, Dtype::F64).unwrap();
    write_matrix(&dir.path().join("y.slcs"), &(&rot * &x), Dtype::F64).unwrap();
    let out = dir.path().join("r.slcs");
    let v = json(&[
        "align",
        "--source",
        s(&dir.path().join("x.slcs")),
        "--target",
        s(&dir.path().join("y.slcs")),
        "--out",
        s(&out),
    ]);
    assert!(v["rows"][0]["residual"].as_f64().unwrap() < 1e-9);
    let (r, _) = slics::io::read_matrix(&out).unwrap();
    assert!((r - rot).norm() < 1e-12);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "seed = 5\n[train]\nd0 = 2\niterations = 1\n").unwrap();
    let ck = dir.path().join("ck");
    let v = json(&["--config", s(&cfg), "fit", "--manifest", s(&m), "--checkpoint", s(&ck)]);
    assert_eq!(v["seed"], 5);
    assert_eq!(v["rows"][0]["atoms"], 8);
    let v = json(&["--config", s(&cfg), "fit", "--manifest", s(&m), "--checkpoint", s(&ck), "--d0", "3", "--seed", "6"]);
    assert_eq!(v["seed"], 6);
    assert_eq!(v["rows"][0]["atoms"], 12);
    let saved = std::fs::read_to_string(ck.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 6"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    let run = |threads: &str, ck: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_slics"))
            .args(["fit", "--manifest", s(&m), "--checkpoint", s(&dir.path().join(ck)), "--iterations", "2"])
            .env("SLICS_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read(dir.path().join(ck).join("checkpoint.json")).unwrap()
    };
    assert_eq!(run("1", "a"), run("3", "b"));
}
