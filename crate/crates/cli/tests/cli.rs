use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use cgnet::dataset::imageio::{save_gray, save_rgb};
use cgnet::dataset::{write_manifest, ManifestLine, Split};
use cgnet::verify::end_to_end_config;
use serde_json::Value;

fn cgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_str(stdout(o).trim()).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates 4 samples (one of them in the test split) and a tiny config.
fn fixture(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    let o = cgnet(&[
        "synth", "--out", p(&data), "--n-samples", "4", "--image-side", "32", "--test-every", "4", "--classes", "blob,ring",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cfg = end_to_end_config();
    cfg.optim.steps = 2;
    cfg.optim.batch_size = 2;
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).unwrap();
    (p(&data.join("manifest.jsonl")).to_string(), p(&cfg_path).to_string())
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, cfg) = fixture(dir.path());
    let run = dir.path().join("run");

    let o = cgnet(&["--json", "train", "--config", &cfg, "--manifest", &manifest, "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = json(&o);
    assert_eq!(t["steps"], 2);
    assert_eq!(t["samples"], 3, "only train-split records are used");
    for f in ["checkpoint.cgt", "loss.csv", "config.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,bce,iou,total,seg_p1"));
    assert_eq!(csv.lines().count(), 3);

    let ckpt = run.join("checkpoint.cgt");
    let eval_dir = dir.path().join("eval");
    let o = cgnet(&["eval", "--checkpoint", p(&ckpt), "--manifest", &manifest, "--out", p(&eval_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("aggregate") && text.contains("S_m"), "{text}");
    assert!(text.contains("NOT REPRODUCIBLE"), "{text}");
    let per = std::fs::read_to_string(eval_dir.join("metrics_per_sample.csv")).unwrap();
    assert_eq!(per.lines().count(), 1 + 4);
    assert!(eval_dir.join("metrics.csv").is_file());

    let o = cgnet(&[
        "--json", "eval", "--checkpoint", p(&ckpt), "--manifest", &manifest, "--out", p(&eval_dir), "--split", "test",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = json(&o);
    assert_eq!(e["per_sample"].as_array().unwrap().len(), 1);
    assert_eq!(e["synthetic"], true);
    assert!(e["caveat"].as_str().unwrap().starts_with("NOT REPRODUCIBLE"));
    let s = e["aggregate"]["s_measure"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s));
}

#[test]
fn same_seed_trains_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, cfg) = fixture(dir.path());
    let read = |name: &str| {
        let out = dir.path().join(name);
        let o = cgnet(&["train", "--config", &cfg, "--manifest", &manifest, "--out", p(&out), "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
        (std::fs::read(out.join("checkpoint.cgt")).unwrap(), std::fs::read(out.join("loss.csv")).unwrap())
    };
    assert_eq!(read("a"), read("b"));
}

fn toy_manifest(dir: &Path, name: &str, recs: &[(&str, &[&str])]) -> String {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let mask: Vec<u8> = (0..16).map(|i| if i < 8 { 255 } else { 0 }).collect();
    let lines: Vec<ManifestLine> = recs
        .iter()
        .map(|(id, labels)| {
            let image = format!("img/{id}.png");
            save_rgb(&dir.join(&image), &[0.5; 48], 4, 4).unwrap();
            let masks: BTreeMap<String, String> = labels
                .iter()
                .map(|l| {
                    let rel = format!("img/{id}_{l}.png");
                    save_gray(&dir.join(&rel), mask.clone(), 4, 4).unwrap();
                    (l.to_string(), rel)
                })
                .collect();
            ManifestLine {
                id: id.to_string(),
                image,
                masks,
                edge: None,
                split: Split::Train,
            }
        })
        .collect();
    let path = dir.join(name);
    write_manifest(&path, &lines).unwrap();
    p(&path).to_string()
}

#[test]
fn split_matches_hand_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let train = toy_manifest(dir.path(), "train.jsonl", &[("t1", &["cat", "dog"]), ("t2", &["fish"]), ("t3", &["owl", "frog"])]);
    let test = toy_manifest(
        dir.path(),
        "test.jsonl",
        &[
            ("a", &["cat"]),
            ("b", &["crab"]),
            ("c", &["fish", "seal"]),
            ("d", &["dog"]),
            ("e", &["crab"]),
            ("f", &["frog", "bat"]),
        ],
    );
    let out = dir.path().join("split.json");
    let o = cgnet(&["--json", "split", "--train-manifest", &train, "--test-manifest", &test, "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&o);
    assert_eq!(r["seen_samples"], serde_json::json!(["a", "d"]));
    assert_eq!(r["unseen_samples"], serde_json::json!(["b", "c", "e", "f"]));
    assert_eq!(r["seen_classes"], serde_json::json!(["cat", "dog", "fish", "frog"]));
    assert_eq!(r["unseen_classes"], serde_json::json!(["bat", "crab", "seal"]));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(written, r);

    let o = cgnet(&["split", "--train-manifest", &train, "--test-manifest", &test]);
    assert!(stdout(&o).contains("unseen classes (3): bat, crab, seal"), "{}", stdout(&o));
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cgnet(&["train", "--manifest", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(2), "missing --out");
    let o = cgnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("none.jsonl");
    let o = cgnet(&["train", "--manifest", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    let o = cgnet(&["split"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cgnet(&["synth", "--out", p(&dir.path().join("s")), "--camouflage-strength", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("camouflage_strength"), "{}", stderr(&o));
}

#[test]
fn invalid_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy_manifest(dir.path(), "m.jsonl", &[("a", &["cat"])]);
    save_gray(&dir.path().join("img/a_cat.png"), vec![128; 16], 4, 4).unwrap();
    let o = cgnet(&["train", "--manifest", &m, "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("non-binary mask"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let o = cgnet(&["--json", "gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&o);
    assert_eq!(r["passed"], true);
    assert!(r["checks"].as_array().unwrap().len() > 50);

    let o = cgnet(&["gradcheck", "--inject-grad-fault"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("gradcheck FAILED"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("sigmoid") && l.ends_with("FAIL")), "{text}");
}
