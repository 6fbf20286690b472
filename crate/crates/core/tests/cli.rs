use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basiscluster"))
        .args(args)
        .env("BASISCLUSTER_THREADS", "1")
        .output()
        .expect("spawn basiscluster")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_is_deterministic_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = cli(&["generate", "--kind", "five_cluster", "--n", "40", "--seed", "9", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = read(&a);
    assert_eq!(text, read(&b));
    let header = text.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 50);
    assert_eq!(text.lines().count(), 41);
    assert!(dir.path().join("a.truth.csv").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    assert_eq!(cli(&["generate", "--kind", "spiral", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(cli(&["train"]).status.code(), Some(2));
    assert_eq!(cli(&["bogus"]).status.code(), Some(2));
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "a,b\n1,2\n3,4\n").unwrap();
    let o = cli(&["train", "--data", s(&data), "--k", "0", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let missing = dir.path().join("missing.csv");
    assert_eq!(cli(&["train", "--data", s(&missing), "--out", s(&o)]).status.code(), Some(3));
    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "a,b\n1,2\n3\n").unwrap();
    let out = cli(&["train", "--data", s(&ragged), "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains('3'));
    let real = dir.path().join("real.csv");
    std::fs::write(&real, "a,b\n1.5,2\n3,4\n").unwrap();
    assert_eq!(
        cli(&["train", "--data", s(&real), "--likelihood", "zinb", "--out", s(&o)]).status.code(),
        Some(3)
    );
}

#[test]
fn train_report_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.csv");
    let truth = dir.path().join("toy.truth.csv");
    assert!(cli(&["generate", "--kind", "five_cluster", "--n", "60", "--per-group", "3", "--out", s(&data)]).status.success());
    let run = dir.path().join("run");
    let o = cli(&[
        "train", "--data", s(&data), "--k", "6", "--epochs", "5", "--batch-size", "16", "--restarts", "2", "--out", s(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "trace.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trace = read(&run.join("trace.csv"));
    assert!(trace.lines().next().unwrap().starts_with("step,"));
    assert_eq!(trace.lines().count(), 7);
    let manifest: serde_json::Value = serde_json::from_str(&read(&run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let rep = dir.path().join("report");
    let o = cli(&[
        "report",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--data",
        s(&data),
        "--truth",
        s(&truth),
        "--grid",
        "11",
        "--out",
        s(&rep),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let phi = read(&rep.join("phi.csv"));
    assert_eq!(phi.lines().count(), 16);
    for line in phi.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    assert_eq!(read(&rep.join("curves.csv")).lines().count(), 12);
    assert_eq!(read(&rep.join("delta.csv")).lines().count(), 1 + 15 * 6);
    assert_eq!(read(&rep.join("latent.csv")).lines().count(), 61);
    assert_eq!(read(&rep.join("cooccurrence.csv")).lines().count(), 16);
    let summary = read(&rep.join("summary.csv"));
    let v: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("v_measure,"))
        .expect("v_measure line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&v));

    let cmp = dir.path().join("compare.csv");
    let o = cli(&[
        "compare", "--data", s(&data), "--truth", s(&truth), "--k", "6", "--epochs", "3", "--batch-size", "16", "--kmeans",
        "--out", s(&cmp),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&cmp);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "scheme,restart,status,v_measure,nonempty_clusters,final_elbo");
    for scheme in ["collapsed", "noncollapsed", "fixed_pi", "kmeans"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{scheme},0,ok,"))), "{scheme}");
    }
}

#[test]
fn report_rejects_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.csv");
    let other = dir.path().join("other.csv");
    assert!(cli(&["generate", "--kind", "five_cluster", "--n", "30", "--per-group", "2", "--out", s(&data)]).status.success());
    assert!(cli(&["generate", "--kind", "shifted", "--n", "30", "--p", "4", "--out", s(&other)]).status.success());
    let run = dir.path().join("run");
    assert!(cli(&["train", "--data", s(&data), "--k", "3", "--epochs", "1", "--out", s(&run)]).status.success());
    let o = cli(&["report", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&other), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn zinb_counts_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("counts.csv");
    assert!(cli(&["generate", "--kind", "zinb", "--n", "40", "--p", "6", "--out", s(&data)]).status.success());
    let run = dir.path().join("run");
    let o = cli(&[
        "train", "--data", s(&data), "--likelihood", "zinb", "--k", "3", "--epochs", "2", "--out", s(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = dir.path().join("rep");
    let o = cli(&["report", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&data), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curves = read(&rep.join("curves.csv"));
    for line in curves.lines().skip(1) {
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() > 0.0));
    }
}
