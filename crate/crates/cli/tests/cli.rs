use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stein_encoder::experiments::{generate, synthetic_cohort, CohortShape, SimConfig};

const MANIFEST_XZ: &str = "[columns]\ny = \"response\"\n\n[prefixes]\nx = \"nuisance\"\nz = \"feature\"\n";
const SMALL_MLP: &str = "[mlp]\nepochs = 4\nhidden = [8]\nbatch_size = 32\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stein-encoder"));
    c.env_remove("STEIN_ENCODER_THREADS").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, contents).unwrap();
    p
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(str::to_string).collect()
}

/// Model I training split written as `y, x1.., z1..` plus a manifest.
fn simulated_file(dir: &Path, seed: u64, n: usize) -> (PathBuf, PathBuf, Vec<String>) {
    let cfg = SimConfig { n_train: n, n_test: 2, base_seed: seed, replications: 1, ..Default::default() };
    let sc = generate(&cfg, 0).unwrap();
    let data = dir.join("sim.csv");
    sc.train.write_csv(&data, "y").unwrap();
    let truth = (0..sc.gamma.len()).filter(|&j| sc.gamma[j] != 0.0).map(|j| sc.train.names_z()[j].clone()).collect();
    (data, write(dir, "manifest.toml", MANIFEST_XZ), truth)
}

fn small_simulate(out: &Path, cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "--config", s(cfg), "--seed", "11", "simulate", "--model", "I", "--setting", "indep", "--p", "20", "--q",
        "20", "--n-train", "300", "--n-test", "100", "--reps", "5", "--out", s(out),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn simulate_writes_one_row_per_replication() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.toml", SMALL_MLP);
    let out = dir.path().join("run");
    ok(&small_simulate(&out, &cfg, &[]));
    let rows = lines(&out.join("replications.csv"));
    assert_eq!(rows.len(), 1 + 5);
    assert!(rows[1].split(',').nth(13).is_some_and(|v| !v.is_empty()), "method scores present");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["tables"][0]["rows"].as_array().unwrap().len(), 5);
    assert_eq!(report["run"]["seed"], 11);
    assert_eq!(report["run"]["mlp"]["epochs"], 4);
    assert_eq!(report["run"]["sim"]["base_seed"], 11);
    assert!(std::fs::read_to_string(out.join("report.txt")).unwrap().contains("Angle(Proj)"));
}

#[test]
fn simulate_is_deterministic_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.toml", SMALL_MLP);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&small_simulate(&a, &cfg, &["--no-mlp"]));
    ok(&small_simulate(&b, &cfg, &["--no-mlp"]));
    for f in ["report.json", "report.txt", "replications.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = bin()
        .env("STEIN_ENCODER_THREADS", "2")
        .args(["--config", s(&cfg), "--seed", "11", "simulate", "--model", "I", "--setting", "indep"])
        .args(["--n-train", "300", "--n-test", "100", "--reps", "5", "--no-mlp", "--out", s(&c)])
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(lines(&a.join("replications.csv")), lines(&c.join("replications.csv")));
}

#[test]
fn invalid_model_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--model", "IV", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("IV"));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.toml", "[mlp]\nepoch = 4\n");
    let o = run(&["--config", s(&cfg), "simulate", "--reps", "1", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let cfg = write(dir.path(), "cfg2.toml", "[pipeline.tau]\nmode = \"permutation\"\npermutations = 5\nlevel = 0.95\n");
    let o = run(&["--config", s(&cfg), "simulate", "--reps", "1", "--no-mlp", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_manifest_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, _) = simulated_file(dir.path(), 1, 200);
    let o = run(&["fit", "--data", s(&data), "--manifest", s(&dir.path().join("nope.toml")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}

#[test]
fn degenerate_response_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("y,x1,z1,z2,z3\n");
    for i in 0..60 {
        let v = i as f64;
        csv.push_str(&format!("1.0,{},{},{},{}\n", (v * 0.37).sin(), (v * 0.11).cos(), (v * 0.7).sin(), v.sqrt()));
    }
    let data = write(dir.path(), "flat.csv", &csv);
    let manifest = write(dir.path(), "m.toml", MANIFEST_XZ);
    let o = run(&["fit", "--data", s(&data), "--manifest", s(&manifest), "--out", s(&dir.path().join("f"))]);
    assert_eq!(code(&o), 1, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fit_recovers_true_support() {
    let seeds = [3_u64, 4, 5, 6, 7];
    let mut hits = 0;
    for seed in seeds {
        let dir = tempfile::tempdir().unwrap();
        let (data, manifest, truth) = simulated_file(dir.path(), seed, 1000);
        let out = dir.path().join("fit");
        ok(&run(&["--seed", &seed.to_string(), "fit", "--data", s(&data), "--manifest", s(&manifest), "--out", s(&out)]));
        let art: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("encoder.json")).unwrap()).unwrap();
        let top: Vec<String> = art["top_features"].as_array().unwrap()[..truth.len()]
            .iter()
            .map(|f| f["name"].as_str().unwrap().to_string())
            .collect();
        if truth.iter().all(|t| top.contains(t)) {
            hits += 1;
        }
    }
    assert!(hits * 10 >= seeds.len() * 8, "support recovered in {hits} of {}", seeds.len());
}

#[test]
fn top_genes_keeps_exactly_k_features() {
    let dir = tempfile::tempdir().unwrap();
    let co = dir.path().join("co");
    ok(&run(&["--seed", "3", "cohort", "--n", "300", "--p", "12", "--q", "450", "--out", s(&co)]));
    let out = dir.path().join("fit");
    ok(&run(&[
        "fit", "--data", s(&co.join("cohort.csv")), "--manifest", s(&co.join("manifest.toml")), "--top-genes", "400",
        "--emit-plot-data", "--out", s(&out),
    ]));
    let art: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("encoder.json")).unwrap()).unwrap();
    assert_eq!(art["feature_names"].as_array().unwrap().len(), 400);
    assert_eq!(art["report"]["encoder"]["gamma"]["dim"][0], 400);
    assert_eq!(art["prescreen"]["kept"], 400);
    assert_eq!(art["prescreen"]["available"], 450);
    let plot = lines(&out.join("plot_data.csv"));
    assert_eq!(plot[0], "y,t_hat,pc1");
    assert_eq!(plot.len(), 301);
}

#[test]
fn cohort_shape_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(&["--seed", "9", "cohort", "--n", "50", "--p", "10", "--q", "30", "--out", s(dir.path())]));
    let header = lines(&dir.path().join("cohort.csv"))[0].clone();
    let expect = synthetic_cohort(&CohortShape { n: 50, p: 10, q: 30, seed: 9, ..Default::default() }).unwrap();
    assert_eq!(header.split(',').count(), 1 + expect.data.p() + expect.data.q());
    assert!(dir.path().join("manifest.toml").is_file());
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    encoder: PathBuf,
    model: PathBuf,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (data, manifest, _) = simulated_file(&root, 21, 300);
    let cfg = write(&root, "cfg.toml", SMALL_MLP);
    let fit_dir = root.join("fit");
    ok(&run(&["fit", "--data", s(&data), "--manifest", s(&manifest), "--out", s(&fit_dir)]));
    let encoder = fit_dir.join("encoder.json");
    let model = root.join("model");
    ok(&run(&[
        "--config", s(&cfg), "train", "--data", s(&data), "--manifest", s(&manifest), "--encoder", s(&encoder), "--out",
        s(&model),
    ]));
    Trained { _dir: dir, root, data, encoder, model }
}

#[test]
fn encode_then_predict_matches_one_shot() {
    let t = trained();
    let t_hat = t.root.join("t.csv");
    ok(&run(&["encode", "--encoder", s(&t.encoder), "--data", s(&t.data), "--out", s(&t_hat)]));
    assert_eq!(lines(&t_hat).len(), 301);
    let (p1, p2) = (t.root.join("p1.csv"), t.root.join("p2.csv"));
    ok(&run(&["predict", "--model", s(&t.model), "--data", s(&t.data), "--t-hat", s(&t_hat), "--out", s(&p1)]));
    ok(&run(&["predict", "--model", s(&t.model), "--data", s(&t.data), "--encoder", s(&t.encoder), "--out", s(&p2)]));
    let (a, b) = (lines(&p1), lines(&p2));
    assert_eq!(a.len(), 301);
    assert_eq!(a, b);
    assert!(a[1..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
}

#[test]
fn mismatched_features_exit_two() {
    let t = trained();
    let full = lines(&t.data);
    let keep: Vec<usize> = full[0].split(',').enumerate().filter(|(_, h)| *h != "z20").map(|(i, _)| i).collect();
    let cut: Vec<String> = full
        .iter()
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(",")
        })
        .collect();
    let narrow = write(&t.root, "narrow.csv", &(cut.join("\n") + "\n"));
    let out = t.root.join("o.csv");
    let o = run(&["encode", "--encoder", s(&t.encoder), "--data", s(&narrow), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["predict", "--model", s(&t.model), "--data", s(&narrow), "--encoder", s(&t.encoder), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let short = write(&t.root, "short.csv", "t_hat\n0.5\n");
    let o = run(&["predict", "--model", s(&t.model), "--data", s(&t.data), "--t-hat", s(&short), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["predict", "--model", s(&t.model), "--data", s(&t.data), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_rows_give_empty_output() {
    let t = trained();
    let header = lines(&t.data)[0].clone();
    let empty = write(&t.root, "empty.csv", &(header + "\n"));
    let (te, pe) = (t.root.join("te.csv"), t.root.join("pe.csv"));
    ok(&run(&["encode", "--encoder", s(&t.encoder), "--data", s(&empty), "--out", s(&te)]));
    assert_eq!(lines(&te), vec!["t_hat".to_string()]);
    ok(&run(&["predict", "--model", s(&t.model), "--data", s(&empty), "--encoder", s(&t.encoder), "--out", s(&pe)]));
    assert_eq!(lines(&pe), vec!["prediction".to_string()]);
}

#[test]
fn raw_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, manifest, _) = simulated_file(dir.path(), 5, 200);
    let cfg = write(dir.path(), "cfg.toml", SMALL_MLP);
    let model = dir.path().join("raw");
    ok(&run(&["--config", s(&cfg), "train", "--data", s(&data), "--manifest", s(&manifest), "--out", s(&model)]));
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(model.join("model.json")).unwrap()).unwrap();
    assert_eq!(sidecar["kind"], "raw");
    let out = dir.path().join("p.csv");
    ok(&run(&["predict", "--model", s(&model), "--data", s(&data), "--out", s(&out)]));
    assert_eq!(lines(&out).len(), 201);
}
