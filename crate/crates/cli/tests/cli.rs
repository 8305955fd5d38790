use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedcov");

fn fedcov(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fedcov(args);
    assert!(
        out.status.success(),
        "fedcov {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, centers: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data_c{centers}_s{seed}"));
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--subjects",
        "120",
        "--features",
        "30",
        "--covariates",
        "4",
        "--centers",
        &centers.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    out
}

fn sha(results: &Path) -> String {
    fs::read_to_string(results.join("result.sha256")).unwrap().trim().to_string()
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let a = synth(&t.path().join("a"), 3, 5);
    let b = synth(&t.path().join("b"), 3, 5);
    assert_eq!(read_tree(&a), read_tree(&b));
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("center_sizes = 40,40,40"));
    assert!(fedcov(&["synth", "--out", s(&t.path().join("bad")), "--subjects", "100", "--centers", "3"])
        .status
        .code()
        .is_some_and(|c| c != 0));
}

#[test]
fn run_writes_results_and_passes_audit() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 3, 1);
    let r = t.path().join("r");
    ok(&[
        "run", "--data", s(&data), "--out", s(&r), "--admm-iterations", "10", "--variance-threshold", "0.8",
    ]);
    for f in ["global_mean.mat", "w_tilde.mat", "basis.mat", "admm_trace.csv", "transcript.bin", "audit.txt"] {
        assert!(r.join(f).is_file(), "missing {f}");
    }
    assert!(fs::read_to_string(r.join("audit.txt")).unwrap().starts_with("result: PASS"));
    let trace = fs::read_to_string(r.join("admm_trace.csv")).unwrap();
    assert!(trace.starts_with("# fedcov config_hash="));
    assert_eq!(trace.lines().count(), 2 + 10);
    let manifest = fs::read_to_string(r.join("manifest.txt")).unwrap();
    assert!(manifest.contains("messages = 48"));
}

#[test]
fn repeated_runs_and_transports_agree() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 2);
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    let common = ["--share-scores", "--m-components", "3"];
    for (out, transport) in [(&a, "inproc"), (&b, "inproc"), (&c, "file")] {
        let mut args = vec!["run", "--data", s(&data), "--out", s(out), "--transport", transport];
        args.extend(common);
        ok(&args);
    }
    assert_eq!(sha(&a), sha(&b));
    assert_eq!(sha(&a), sha(&c));
    assert!(c.join("exchange/stats_0/stats_0_master.msg").is_file());
    assert_eq!(fs::read(a.join("transcript.bin")).unwrap(), fs::read(c.join("transcript.bin")).unwrap());
}

#[test]
fn separate_processes_match_single_process() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 3, 3);
    let reference = t.path().join("ref");
    ok(&["run", "--data", s(&data), "--out", s(&reference)]);

    let exchange = t.path().join("exchange");
    let out = t.path().join("coord");
    let agents: Vec<_> = (0..3)
        .map(|i| {
            Command::new(BIN)
                .args([
                    "center-agent", "--data", s(&data), "--center-id", &i.to_string(), "--exchange", s(&exchange),
                    "--poll-ms", "2",
                ])
                .spawn()
                .unwrap()
        })
        .collect();
    ok(&["coordinator", "--data", s(&data), "--exchange", s(&exchange), "--out", s(&out), "--poll-ms", "2"]);
    for mut a in agents {
        assert!(a.wait().unwrap().success());
    }
    assert_eq!(sha(&out), sha(&reference));
}

#[test]
fn missing_center_times_out_with_phase() {
    let t = tempfile::tempdir().unwrap();
    let exchange = t.path().join("x");
    let out = fedcov(&[
        "coordinator", "--centers", "2", "--exchange", s(&exchange), "--out", s(&t.path().join("o")),
        "--poll-ms", "1", "--idle-timeout-ms", "50",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("phase standardize"), "{err}");
}

#[test]
fn report_merges_center_counts_and_full_rank_scatter_is_diagonal() {
    let t = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for c in [2usize, 4] {
        let data = synth(t.path(), c, 9);
        let r = t.path().join(format!("r{c}"));
        ok(&[
            "run", "--data", s(&data), "--out", s(&r), "--variance-threshold", "1.0", "--share-scores",
            "--m-components", "4", "--admm-iterations", "200",
        ]);
        dirs.push(r);
    }
    let rep = t.path().join("report");
    ok(&["report", "--results", s(&dirs[0]), s(&dirs[1]), "--out", s(&rep)]);

    let mse = fs::read_to_string(rep.join("mse_vs_iteration.csv")).unwrap();
    let mut cs: Vec<&str> = mse.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    cs.dedup();
    assert_eq!(cs, vec!["2", "4"]);

    let scatter = fs::read_to_string(rep.join("pc_scatter.csv")).unwrap();
    for line in scatter.lines().skip(2) {
        let f: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert!((f[0] - f[1]).abs() < 1e-6, "{line}");
    }
    let proj = fs::read_to_string(rep.join("projections.csv")).unwrap();
    assert!(proj.lines().nth(1).unwrap().starts_with("C,center,subject,label,pc1"));
    assert_eq!(proj.lines().count(), 2 + 240);

    ok(&["compare", "--results", s(&dirs[1])]);
    assert!(dirs[1].join("comparison.csv").is_file());
}

#[test]
fn config_file_and_unknown_keys() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 2, 4);
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "# pipeline\nadmm-iterations = 3\nrho = 2\n").unwrap();
    let r = t.path().join("r");
    ok(&["run", "--config", s(&cfg), "--data", s(&data), "--out", s(&r)]);
    let manifest = fs::read_to_string(r.join("manifest.txt")).unwrap();
    assert!(manifest.contains("admm_rounds = 3") && manifest.contains("rho = 2"));

    fs::write(&cfg, "admm_iteration = 3\n").unwrap();
    let out = fedcov(&["run", "--config", s(&cfg), "--data", s(&data), "--out", s(&t.path().join("r2"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn experiment_writes_fold_csvs() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("exp");
    ok(&[
        "experiment", "--out", s(&out), "--subjects", "120", "--features", "20", "--covariates", "3", "--folds", "2",
        "--center-counts", "2,4",
    ]);
    let folds = fs::read_to_string(out.join("folds.csv")).unwrap();
    assert_eq!(folds.lines().nth(1).unwrap(), "fold,C,iteration,mse_w,pc_index,cosine_similarity");
    assert_eq!(folds.matches("fold,C").count(), 1);
    let summary = fs::read_to_string(out.join("mse_vs_iteration.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2 + 2 * 10);
}
