use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edd_core::matrix_io::{read_matrix, write_matrix, MatrixFormat};
use edd_core::spectra::{mp_params, sample_gaussian_data};
use edd_core::theory::MpIntegrator;
use edd_core::{dynamics, empirics};
use ndarray::Array2;
use serde_json::Value;
use tempfile::TempDir;

fn edd(args: &[&str]) -> Output {
    edd_with_env(args, &[])
}

fn edd_with_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_edd"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run edd")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `t,<value>,...` CSV as `(t, first value column)`.
fn read_curve(path: impl AsRef<Path>) -> Vec<(u64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect()
}

fn assert_manifest(dir: &Path, command: &str) -> Value {
    let manifest = json(dir.join("manifest.json"));
    assert_eq!(manifest["command"], command);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for name in outputs {
        let path = dir.join(name.as_str().unwrap());
        assert!(fs::metadata(&path).unwrap().len() > 0, "{} is empty", path.display());
    }
    manifest
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for name in names {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn clean_curve_is_monotone_from_one_half() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("curve");
    ok(&edd(&["curve", "--lambda", "1", "--sigma", "0", "--out", s(&out)]));
    let curve = read_curve(out.join("curve.csv"));
    assert_eq!(curve[0], (0, 0.5));
    assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    let manifest = assert_manifest(&out, "curve");
    assert_eq!(manifest["parameters"]["lambda"], 1.0);
    assert_eq!(json(out.join("curve.json"))["cell"]["phase"], "NDD_NES");
}

#[test]
fn noisy_curve_shows_double_descent() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("curve");
    ok(&edd(&["curve", "--lambda", "1", "--sigma", "4", "--out", s(&out)]));
    let phase = json(out.join("curve.json"))["cell"]["phase"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(phase.starts_with("EDD"), "{phase}");
}

#[test]
fn usage_errors_exit_2_without_writing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("missing");
    let res = edd(&["curve", "--sigma", "1", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let res = edd(&["curve", "--lambda", "-1", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let res = edd(&["simulate", "--seeds", "5..5", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unstable_learning_rate_exits_3_with_gamma_max() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("unstable");
    let res = edd(&["curve", "--lambda", "1", "--gamma", "0.6", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("gamma_max = 0.5"));
    assert!(!out.exists());
}

#[test]
fn zero_noise_phase_diagram_is_all_ndd_nes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("pd");
    ok(&edd(&[
        "phase-diagram",
        "--sigma-min",
        "0",
        "--sigma-max",
        "0",
        "--steps",
        "10",
        "--points",
        "80",
        "--out",
        s(&out),
    ]));
    let cells = json(out.join("phase_cells.json"));
    let list = cells["cells"].as_array().unwrap();
    assert_eq!(list.len(), 100);
    assert!(list.iter().all(|c| c["phase"] == "NDD_NES"));
    assert!(cells["axes"]["sigma"].as_str().unwrap().contains("variance"));
    assert_eq!(cells["sigmas_sqrt"].as_array().unwrap().len(), 10);
    assert_eq!(cells["sigmas_squared"].as_array().unwrap().len(), 10);
    assert_manifest(&out, "phase-diagram");
}

#[test]
fn default_phase_diagram_has_all_four_phases() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("pd");
    let res = edd(&["phase-diagram", "--steps", "10", "--out", s(&out)]);
    ok(&res);
    let cells = json(out.join("phase_cells.json"));
    assert_eq!(cells["cells"].as_array().unwrap().len(), 100);
    for phase in ["NDD_NES", "NDD_ES", "EDD_NES", "EDD_ES"] {
        assert!(cells["counts"][phase].as_u64().unwrap() > 0, "{phase} missing");
        assert!(String::from_utf8_lossy(&res.stdout).contains(phase));
    }
    let heat = fs::read_to_string(out.join("es_gap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 11);
    assert_eq!(heat.lines().next().unwrap().split(',').count(), 11);
}

#[test]
fn simulate_is_reproducible_and_thread_independent() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let args = |dir: &PathBuf| {
        vec![
            "simulate".to_string(),
            "--seeds".into(),
            "1..10".into(),
            "--sigma".into(),
            "0".into(),
            "--n".into(),
            "200".into(),
            "--points".into(),
            "40".into(),
            "--out".into(),
            s(dir).into(),
        ]
    };
    let run = |dir: &PathBuf, threads: &str| {
        let owned = args(dir);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        ok(&edd_with_env(&refs, &[("EDD_THREADS", threads)]));
    };
    run(&a, "4");
    run(&b, "4");
    run(&c, "1");
    let files = ["stats.csv", "per_seed.csv", "summary.json"];
    same_files(&a, &b, &files);
    same_files(&a, &c, &files);
    let manifest = assert_manifest(&a, "simulate");
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 9);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    let res = edd_with_env(
        &["curve", "--lambda", "1", "--out", s(&out)],
        &[("EDD_THREADS", "zero")],
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn simulate_agrees_with_theory_at_n_4000() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    ok(&edd(&[
        "simulate",
        "--lambda",
        "1",
        "--sigma",
        "1",
        "--compare-theory",
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,mean,stderr,theory,z"));
    for line in lines {
        let z: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(z.abs() <= 3.0, "{line}");
    }
    assert!(json(out.join("summary.json"))["max_abs_z"].as_f64().unwrap() <= 3.0);
}

#[test]
fn uniform_noise_reports_no_double_descent() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("uni");
    ok(&edd(&[
        "simulate",
        "--noise-family",
        "uniform",
        "--lambda",
        "1",
        "--sigma",
        "2",
        "--n",
        "1000",
        "--out",
        s(&out),
    ]));
    assert_eq!(json(out.join("summary.json"))["double_descent"], false);
}

#[test]
fn ablation_contrasts_the_families() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("abl");
    ok(&edd(&[
        "ablation",
        "--lambda",
        "1",
        "--sigma",
        "2",
        "--n",
        "1000",
        "--out",
        s(&out),
    ]));
    let report = json(out.join("ablation.json"));
    let dd = |family: &str| {
        report["entries"]
            .as_array()
            .unwrap()
            .iter()
            .find(|e| e["family"] == family)
            .unwrap()["double_descent"]
            .as_bool()
            .unwrap()
    };
    assert!(dd("eigen_thresholded"));
    assert!(!dd("uniform"));
    assert!(!dd("none"));
    let header = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(header.starts_with("t,mean_eigen_thresholded,stderr_eigen_thresholded,mean_uniform"));
}

fn write_labels(path: &Path, labels: &[usize]) {
    edd_core::matrix_io::write_labels(path, labels).unwrap();
}

#[test]
fn separable_head_reaches_full_accuracy() {
    let tmp = TempDir::new().unwrap();
    let (c, f, n) = (3, 5, 30);
    let labels: Vec<usize> = (0..n).map(|j| j % c).collect();
    let mut x = sample_gaussian_data(n, f, 4).unwrap() * 0.1;
    for (j, &l) in labels.iter().enumerate() {
        x[[l, j]] += 3.0;
    }
    write_matrix(tmp.path().join("x.csv"), &x, MatrixFormat::Csv).unwrap();
    write_labels(&tmp.path().join("y.txt"), &labels);
    let out = tmp.path().join("head");
    ok(&edd(&[
        "converge-head",
        "--features",
        s(&tmp.path().join("x.csv")),
        "--labels",
        s(&tmp.path().join("y.txt")),
        "--out",
        s(&out),
    ]));
    let report = json(out.join("report.json"));
    assert_eq!(report["accuracy_after"], 1.0);
    assert_eq!(read_matrix(out.join("weights.csv")).unwrap().dim(), (c, f));
    assert_manifest(&out, "converge-head");
}

#[test]
fn converged_head_is_a_fixed_point() {
    let tmp = TempDir::new().unwrap();
    let (c, f, n) = (4, 8, 25);
    let x = sample_gaussian_data(n, f, 8).unwrap();
    let labels: Vec<usize> = (0..n).map(|j| (j * 7 + 3) % c).collect();
    let w0 = sample_gaussian_data(f, c, 9).unwrap();
    write_matrix(tmp.path().join("x.bin"), &x, MatrixFormat::Binary).unwrap();
    write_matrix(tmp.path().join("w0.csv"), &w0, MatrixFormat::Csv).unwrap();
    write_labels(&tmp.path().join("y.txt"), &labels);
    let out = tmp.path().join("head");
    ok(&edd(&[
        "converge-head",
        "--features",
        s(&tmp.path().join("x.bin")),
        "--labels",
        s(&tmp.path().join("y.txt")),
        "--w0",
        s(&tmp.path().join("w0.csv")),
        "--format",
        "bin",
        "--out",
        s(&out),
    ]));
    assert!(json(out.join("report.json"))["fixed_point_drift"].as_f64().unwrap() < 1e-8);
    // independent check of the written weights
    let w = read_matrix(out.join("weights.bin")).unwrap();
    let one_hot = dynamics::LabelMatrix::one_hot(&labels, c).unwrap();
    let gamma = 1.0 / edd_core::spectra::decompose(&x).unwrap().max_eigenvalue();
    let next = dynamics::gd_step_xent_linearized(&w, &x, &one_hot, gamma).unwrap();
    let m = dynamics::MMatrix::new(c);
    let drift = (m.apply(&next) - m.apply(&w))
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(drift < 1e-8);
}

#[test]
fn malformed_inputs_exit_4() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.csv"), "# 2 x\n1,2\n").unwrap();
    fs::write(tmp.path().join("y.txt"), "0\n1\n").unwrap();
    let out = tmp.path().join("out");
    let res = edd(&[
        "converge-head",
        "--features",
        s(&tmp.path().join("bad.csv")),
        "--labels",
        s(&tmp.path().join("y.txt")),
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("bad.csv:1"), "{stderr}");
    assert!(!out.exists());
    let res = edd(&[
        "pca-filter",
        "--input",
        s(&tmp.path().join("absent.csv")),
        "--k",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn pca_filter_extremes() {
    let tmp = TempDir::new().unwrap();
    let x = sample_gaussian_data(40, 6, 12).unwrap();
    let input = tmp.path().join("x.csv");
    write_matrix(&input, &x, MatrixFormat::Csv).unwrap();

    let full = tmp.path().join("full");
    ok(&edd(&[
        "pca-filter",
        "--input",
        s(&input),
        "--k",
        "6",
        "--out",
        s(&full),
    ]));
    let back = read_matrix(full.join("filtered.csv")).unwrap();
    assert!((back - &x).iter().all(|v| v.abs() <= 1e-8));
    assert_manifest(&full, "pca-filter");

    let none = tmp.path().join("none");
    ok(&edd(&[
        "pca-filter",
        "--input",
        s(&input),
        "--k",
        "0",
        "--out",
        s(&none),
    ]));
    let flat = read_matrix(none.join("filtered.csv")).unwrap();
    for row in flat.rows() {
        assert!(row.iter().all(|v| (v - row[0]).abs() <= 1e-12));
    }
    assert_eq!(
        json(none.join("explained_variance.json"))["explained_variance_ratio"],
        0.0
    );

    let over = tmp.path().join("over");
    let res = edd(&["pca-filter", "--input", s(&input), "--k", "7", "--out", s(&over)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!over.exists());
}

#[test]
fn pca_explained_variance_matches_mp_partial_moment() {
    let tmp = TempDir::new().unwrap();
    let (n, d) = (4000, 1000);
    let lambda = d as f64 / n as f64;
    let input = tmp.path().join("x.bin");
    write_matrix(&input, &sample_gaussian_data(n, d, 77).unwrap(), MatrixFormat::Binary).unwrap();
    let out = tmp.path().join("pca");
    ok(&edd(&[
        "pca-filter",
        "--input",
        s(&input),
        "--k",
        "500",
        "--format",
        "bin",
        "--out",
        s(&out),
    ]));
    let got = json(out.join("explained_variance.json"))["explained_variance_ratio"]
        .as_f64()
        .unwrap();

    let params = mp_params(lambda).unwrap();
    let upper = |x0: f64| {
        MpIntegrator::new(lambda, x0)
            .unwrap()
            .integrate(|_, above| above as u8 as f64)
    };
    let (mut lo, mut hi) = (params.support_low, params.support_high);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if upper(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let predicted = empirics::mp_upper_partial_moment(lambda, 0.5 * (lo + hi)).unwrap();
    assert!((got / predicted - 1.0).abs() < 0.05, "{got} vs {predicted}");
    let _: Array2<f64> = read_matrix(out.join("components.bin")).unwrap();
}
