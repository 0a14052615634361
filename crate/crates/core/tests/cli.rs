use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eend::commands::{read_counts, read_manifest, COUNTS_NAME, MANIFEST_NAME};

const TINY_MODEL: &str = "\
model.attractor = ta
model.max_speakers = 2
model.dropout = 0
encoder.input_dim = 8
encoder.num_blocks = 1
encoder.model_dim = 16
encoder.heads = 2
encoder.ff_dim = 32
encoder.conv_kernel = 3
ta.num_layers = 1
ta.heads = 2
ta.ff_dim = 32
sim.min_speakers = 1
sim.max_speakers = 2
sim.beta.1 = 2
sim.beta.2 = 2
sim.duration = 5
sim.feature_dim = 8
";

fn diar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY_MODEL}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let cfg = write_config(dir, &format!("sim{seed}.txt"), &format!("sim.n = {n}\n"));
    let out = dir.join(format!("sim{seed}"));
    let o = diar(&["simulate", "--config", &cfg, "--seed", &seed.to_string(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn train(dir: &Path, manifest: &Path, epochs: usize) -> std::path::PathBuf {
    let extra = format!(
        "epochs = {epochs}\noptimizer.lr = 0.001\ntrain.batch_size = 2\ntrain.average_best = 2\n\
         crop_frames = 0\npaths.train_manifest = {m}\npaths.valid_manifest = {m}\n",
        m = manifest.display()
    );
    let cfg = write_config(dir, "train.txt", &extra);
    let out = dir.join("train");
    let o = diar(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

#[test]
fn simulate_writes_requested_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), 10, 3);
    let entries = read_manifest(&a.join(MANIFEST_NAME)).unwrap();
    assert_eq!(entries.len(), 10);
    for e in &entries {
        assert!(e.features.exists() && e.rttm.exists());
    }
    let b_dir = tempfile::tempdir().unwrap();
    let b = simulate(b_dir.path(), 10, 3);
    assert_eq!(
        fs::read(a.join(MANIFEST_NAME)).unwrap(),
        fs::read(b.join(MANIFEST_NAME)).unwrap()
    );
    for e in &entries {
        let name = e.features.file_name().unwrap();
        assert_eq!(
            fs::read(&e.features).unwrap(),
            fs::read(b.join("features").join(name)).unwrap()
        );
    }
}

#[test]
fn missing_beta_is_a_validation_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.txt");
    fs::write(&p, TINY_MODEL.replace("sim.beta.2 = 2\n", "")).unwrap();
    let o = diar(&["simulate", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sim.beta.2"), "{}", stderr(&o));
}

#[test]
fn malformed_config_and_usage_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.txt");
    fs::write(&p, "seed = 1\nno_such_key = 3\n").unwrap();
    let o = diar(&["params", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("c.txt:2:"), "{}", stderr(&o));
    assert_eq!(diar(&["params"]).status.code(), Some(1));
    assert_eq!(diar(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(diar(&["params", "--config", "/nonexistent/c.txt"]).status.code(), Some(1));
    assert_eq!(diar(&["--help"]).status.code(), Some(0));
}

#[test]
fn params_reports_a_total() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", "");
    let o = diar(&["params", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("total")), "{text}");
    assert_eq!(fs::read_to_string(dir.path().join("params.tsv")).unwrap(), text);
}

#[test]
fn train_infer_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 5, 11);
    let manifest = sim.join(MANIFEST_NAME);
    let run = train(dir.path(), &manifest, 2);

    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2, "{metrics}");
    let ckpts: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
        .collect();
    assert!(!ckpts.is_empty());

    // infer on three recordings
    let entries = read_manifest(&manifest).unwrap();
    let three = dir.path().join("three.tsv");
    eend::commands::write_manifest(&three, &entries[..3]).unwrap();
    let extra = format!(
        "paths.manifest = {}\npaths.checkpoint = {}\n",
        three.display(),
        run.join("averaged.ckpt").display()
    );
    let cfg = write_config(dir.path(), "infer.txt", &extra);
    let hyp = dir.path().join("hyp");
    let o = diar(&["infer", "--config", &cfg, "--out", hyp.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for e in &entries[..3] {
        assert!(hyp.join(format!("{}.rttm", e.id)).exists());
    }
    assert_eq!(read_counts(&hyp.join(COUNTS_NAME)).unwrap().len(), 3);

    // a checkpoint for another architecture is rejected with the offending tensors
    let wide = format!("{extra}encoder.model_dim = 32\n");
    let wide_cfg = dir.path().join("wide.txt");
    fs::write(&wide_cfg, format!("{TINY_MODEL}{wide}").replace("encoder.model_dim = 16\n", "")).unwrap();
    let o = diar(&["infer", "--config", wide_cfg.to_str().unwrap(), "--out", hyp.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("shape") && err.contains("encoder."), "{err}");

    // scoring the references against themselves
    let extra = format!("paths.manifest = {}\npaths.hyp_dir = {}\n", manifest.display(), sim.join("rttm").display());
    let cfg = write_config(dir.path(), "score.txt", &extra);
    let o = diar(&["score", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    let all = report.lines().find(|l| l.starts_with("ALL\t")).unwrap();
    assert_eq!(all.split('\t').nth(1), Some("0.0000"), "{report}");
}

#[test]
fn score_without_hypotheses_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 2, 5);
    let extra = format!(
        "paths.manifest = {}\npaths.hyp_dir = {}\n",
        sim.join(MANIFEST_NAME).display(),
        dir.path().join("nothing").display()
    );
    let cfg = write_config(dir.path(), "score.txt", &extra);
    assert_eq!(diar(&["score", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn bench_with_one_repeat_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.txt", "bench.t_values = 20,40\nbench.repeats = 1\n");
    let o = diar(&["bench", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# warning"), "{text}");
}
