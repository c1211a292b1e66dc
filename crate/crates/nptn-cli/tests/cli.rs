use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nptn::data::{write_mnist_idx, DataPaths, Dataset};
use nptn::training::experiment::RunManifest;
use nptn::{NDTensor, Rng};

fn nptn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nptn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_mnist(root: &Path) {
    let mut rng = Rng::new(9);
    fs::create_dir_all(root.join("mnist")).unwrap();
    for (train, n) in [(true, 48), (false, 16)] {
        let images = NDTensor::uniform(&[n, 1, 28, 28], 0.0, 1.0, &mut rng);
        let ds = Dataset::new(images, (0..n).map(|i| i % 10).collect(), "tiny").unwrap();
        let (i, l) = DataPaths::new(root).mnist(train);
        write_mnist_idx(&ds, i, l).unwrap();
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_rerun_from_manifest_eval_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_mnist(&data);
    let out = dir.path().join("run");
    let o = nptn(&[
        "train",
        "--model",
        "mnist-nptn-12-3",
        "--epochs",
        "2",
        "--seed",
        "4",
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "metrics.csv", "checkpoint.nptn"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = RunManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(m.config.train.epochs, 2);
    assert_eq!(m.seed, 4);
    assert_eq!(m.config.arch.layers[0].group_size, 3);
    assert_eq!(m.datasets.len(), 4);
    assert!(m.datasets.iter().all(|d| d.sha256.len() == 64));

    let again = dir.path().join("again");
    let o = nptn(&[
        "train",
        "--config",
        s(&out.join("manifest.json")),
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&again),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );

    let ev = dir.path().join("eval");
    let o = nptn(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.nptn")),
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(doc["test_images"], 16);
    let last = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let err: f64 = last
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();
    assert!((doc["test_error_pct"].as_f64().unwrap() - err).abs() < 1e-3);

    let inv = dir.path().join("inv");
    let o = nptn(&[
        "invariance",
        "--checkpoint",
        s(&out.join("checkpoint.nptn")),
        "--transform",
        "rot90:1",
        "--trials",
        "5",
        "--out-dir",
        s(&inv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(inv.join("invariance.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "layer,m,n,transform,score,max_deviation,trials"
    );
    // layer 0 is 1x12 nodes, layer 1 is 12x16
    assert_eq!(lines.count(), 12 + 12 * 16);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nptn(&["train", "--set", "epohcs=3", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epohcs"));
    let o = nptn(&[
        "preset",
        "--preset",
        "mnist-rot-45",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = nptn(&["gradcheck", "--device", "cuda"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = nptn(&[
        "preset",
        "--preset",
        "mnist-rot-0",
        "--data-dir",
        s(&dir.path().join("nowhere")),
        "--out-dir",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).contains("train-images-idx3-ubyte"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn divergence_is_a_numeric_abort() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_mnist(&data);
    let o = nptn(&[
        "train",
        "--model",
        "convnet-36",
        "--epochs",
        "1",
        "--set",
        "base_lr=1e30",
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn gradcheck_passes_and_mutation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = nptn(&["gradcheck", "--trials", "3", "--out-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("PASS") && !out.contains("FAIL"));
    assert!(fs::read_to_string(dir.path().join("gradcheck.csv"))
        .unwrap()
        .starts_with("layer,tensor,max_abs_error"));
    let o = nptn(&[
        "gradcheck",
        "--trials",
        "3",
        "--mutate",
        "1.01",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invariance_check_and_preset_list() {
    let dir = tempfile::tempdir().unwrap();
    let o = nptn(&["invariance", "--trials", "50", "--out-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("invariance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for row in csv.lines().skip(1) {
        let dev: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
        assert!(dev <= 1e-12);
    }
    let o = nptn(&["preset", "--list"]);
    let names = String::from_utf8_lossy(&o.stdout);
    assert!(names.lines().any(|l| l == "mnist-trans-12"));
    assert_eq!(names.lines().count(), 9);
}
