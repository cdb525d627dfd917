use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use oilad::io::{read_dataset, StepRecord};

const SMALL: &str = r#"
seed = 3
[env]
name = "grid"
grid_file = "grid.txt"
max_len = 60
[data]
train_normal = 200
test_normal = 120
test_policy = 12
test_perturbed = 12
perturbed_max_len = 30
[train]
iterations = 40
[detect]
w_q = 3
w_v = 3
contamination = 0.01
[eval]
test_normals = 60
anomalies_per_class = 6
resamples = 2
"#;

const GRID: &str = "step_reward = -1\ndiscount = 0.9\ngrid:\nS....\n.#...\n...#.\n.....\n....G\n";

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("grid.txt"), GRID).unwrap();
    std::fs::write(dir.path().join("oilad.toml"), SMALL).unwrap();
    dir
}

fn oilad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oilad"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "oilad.toml"])
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = oilad(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn prepare(dir: &Path) {
    ok(dir, &["gen", "--split", "train"]);
    ok(dir, &["gen", "--split", "test"]);
    ok(dir, &["train"]);
    ok(dir, &["fit-boundary"]);
}

fn csv_rows(p: PathBuf) -> usize {
    csv::Reader::from_path(p).unwrap().records().count()
}

#[test]
fn gen_is_reproducible_and_seed_sensitive() {
    let dir = workdir();
    let d = dir.path();
    ok(d, &["gen", "--out", "a.jsonl"]);
    ok(d, &["gen", "--out", "b.jsonl"]);
    ok(d, &["gen", "--out", "c.jsonl", "--seed", "4"]);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.jsonl.manifest.json").len(), read("a.jsonl.manifest.json").len());
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    let data = read_dataset(&d.join("a.jsonl")).unwrap();
    assert_eq!(data.len(), 200);
}

#[test]
fn full_pipeline_and_reports() {
    let dir = workdir();
    let d = dir.path();
    prepare(d);
    let table = ok(d, &["eval"]);
    assert!(table.contains("policy_anomaly") && table.contains("perturbed_anomaly"));
    assert!(d.join("reports/eval.json").exists());
    assert!(d.join("reports/eval.json.manifest.json").exists());
    assert_eq!(csv_rows(d.join("reports/eval.csv")), 2);

    ok(d, &["features", "--out", "feat.csv"]);
    let test = read_dataset(&d.join("data/test.jsonl")).unwrap();
    assert!(csv_rows(d.join("feat.csv")) >= test.len());

    for kind in ["latent", "values", "scores"] {
        let out = format!("{kind}.csv");
        ok(d, &["plot-data", kind, "--out", &out]);
        assert!(csv_rows(d.join(&out)) > 0, "{kind}");
    }

    ok(d, &["ablate", "--out", "ablation.csv"]);
    assert_eq!(csv_rows(d.join("ablation.csv")), 3);

    ok(d, &["sweep", "--windows", "2,4", "--out", "sweep.csv"]);
    assert_eq!(csv_rows(d.join("sweep.csv")), 2);

    let text = ok(d, &["check-theorem", "--out", "theorem.csv"]);
    assert!(!text.is_empty());
    assert!(csv_rows(d.join("theorem.csv")) > 0);
}

#[test]
fn follow_mode_matches_batch_features() {
    let dir = workdir();
    let d = dir.path();
    prepare(d);
    ok(d, &["features", "--out", "feat.csv"]);
    let test = read_dataset(&d.join("data/test.jsonl")).unwrap();
    let picked: Vec<_> = test.trajectories.iter().take(5).collect();
    let mut stdin = String::new();
    // interleave the steps of several trajectories
    let longest = picked.iter().map(|t| t.len()).max().unwrap();
    for i in 0..longest {
        for t in &picked {
            if let Some(s) = t.steps.get(i) {
                let rec = StepRecord { traj_id: t.id.clone(), s: s.s.clone(), a: s.a };
                stdin.push_str(&serde_json::to_string(&rec).unwrap());
                stdin.push('\n');
            }
        }
    }
    let mut child = Command::new(env!("CARGO_BIN_EXE_oilad"))
        .current_dir(d)
        .args(["score", "--follow", "--config", "oilad.toml", "--out", "stream.jsonl"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();

    let mut batch = csv::Reader::from_path(d.join("feat.csv")).unwrap();
    let mut expected: Vec<(String, u64, f64, f64)> = batch
        .records()
        .map(|r| r.unwrap())
        .filter(|r| picked.iter().any(|t| t.id == r[0]))
        .map(|r| (r[0].to_string(), r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap()))
        .collect();
    let mut got: Vec<(String, u64, f64, f64)> = lines
        .iter()
        .map(|v| {
            (
                v["traj_id"].as_str().unwrap().to_string(),
                v["window_end"].as_u64().unwrap(),
                v["f_ao"].as_f64().unwrap(),
                v["f_sa"].as_f64().unwrap(),
            )
        })
        .collect();
    expected.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    got.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert_eq!((&g.0, g.1), (&e.0, e.1));
        assert!((g.2 - e.2).abs() < 1e-9 && (g.3 - e.3).abs() < 1e-9, "{g:?} vs {e:?}");
    }
    assert_eq!(std::fs::read_to_string(d.join("stream.jsonl")).unwrap().lines().count(), lines.len());
}

#[test]
fn error_exit_codes() {
    let dir = workdir();
    let d = dir.path();
    assert_eq!(oilad(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(oilad(d, &["gen", "--set", "data.nonsense=1"]).status.code(), Some(2));

    std::fs::write(d.join("future.jsonl"), "{\"oilad_dataset_version\":99}\n").unwrap();
    let out = oilad(d, &["train", "--data", "future.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("99"));

    std::fs::write(d.join("broken.jsonl"), "{\"oilad_dataset_version\":1}\n{not json}\n").unwrap();
    let out = oilad(d, &["train", "--data", "broken.jsonl"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.jsonl:2:"));

    assert_eq!(oilad(d, &["train", "--data", "missing.jsonl"]).status.code(), Some(4));

    std::fs::write(d.join("busy.jsonl.lock"), "").unwrap();
    assert_eq!(oilad(d, &["gen", "--out", "busy.jsonl"]).status.code(), Some(4));
    assert!(!d.join("busy.jsonl").exists());
}
