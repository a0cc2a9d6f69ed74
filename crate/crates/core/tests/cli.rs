use std::fs;
use std::path::Path;
use std::process::Command;

use vilds::io::{read_csv, ModelFile};
use vilds::model::GenerativeParams;
use vilds::posterior::{NetShape, PosteriorKind, Recognition};
use vilds::train::FitConfig;

fn vilds(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vilds")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_requested_shape_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let (code, text) = vilds(&["simulate", "--family", "lds", "--T", "100", "--n", "2", "--m", "5", "--seed", "1", "--out-dir", s(out)]);
        assert_eq!(code, 0, "{text}");
        assert!(text.contains("T=100 n=2 m=5 seed=1"), "{text}");
    }
    let (header, rows) = read_csv(&a.join("x.csv")).unwrap();
    assert_eq!(header.len(), 5);
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.len() == 5));
    assert_eq!(fs::read(a.join("x.csv")).unwrap(), fs::read(b.join("x.csv")).unwrap());
    for f in ["z_true.csv", "theta.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn simulated_counts_are_non_negative_integers() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = vilds(&["simulate", "--family", "plds", "--T", "200", "--n", "2", "--m", "6", "--seed", "4", "--out-dir", s(dir.path())]);
    assert_eq!(code, 0);
    let (_, rows) = read_csv(&dir.path().join("x.csv")).unwrap();
    assert!(rows.iter().flatten().all(|&v| v >= 0.0 && v.fract() == 0.0));
}

#[test]
fn fit_logs_every_epoch_and_keeps_fixed_theta() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fit = dir.path().join("fit");
    vilds(&["simulate", "--family", "lds", "--T", "80", "--n", "1", "--m", "3", "--seed", "2", "--out-dir", s(&data)]);
    let (code, text) = vilds(&[
        "fit", "--data", s(&data.join("x.csv")), "--family", "lds", "--posterior", "mf", "--epochs", "7",
        "--window", "40", "--batches-per-epoch", "5", "--hidden-width", "8", "--layers", "2", "--fix-theta",
        "--theta", s(&data.join("theta.json")), "--out", s(&fit),
    ]);
    assert_eq!(code, 0, "{text}");
    let log = fs::read_to_string(fit.join("trainlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert_eq!(
        log.lines().next().unwrap(),
        "epoch,wall_seconds,elbo,lr_scale,cholesky_failures,spectral_radius_A"
    );
    let model = ModelFile::read(&fit.join("model.json")).unwrap();
    let input: GenerativeParams = serde_json::from_str(&fs::read_to_string(data.join("theta.json")).unwrap()).unwrap();
    assert_eq!(model.theta, input);
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(model.theta.free_params()), bits(input.free_params()));
}

#[test]
fn fit_improves_elbo_on_tiny_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fit = dir.path().join("fit");
    vilds(&["simulate", "--family", "lds", "--T", "200", "--n", "1", "--m", "3", "--seed", "5", "--out-dir", s(&data)]);
    let (code, text) = vilds(&[
        "fit", "--data", s(&data.join("x.csv")), "--family", "lds", "--posterior", "vildsblk", "--epochs", "100",
        "--batches-per-epoch", "10", "--hidden-width", "16", "--layers", "3", "--n", "1", "--seed", "5",
        "--out", s(&fit),
    ]);
    assert_eq!(code, 0, "{text}");
    let (_, rows) = read_csv(&fit.join("trainlog.csv")).unwrap();
    assert_eq!(rows.len(), 100);
    let (first, last) = (rows[0][2], rows[99][2]);
    assert!(last > first, "ELBO went from {first} to {last}");
}

#[test]
fn eval_writes_moments_and_self_comparison_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    vilds(&["simulate", "--family", "lds", "--T", "3", "--n", "2", "--m", "2", "--seed", "1", "--out-dir", s(&data)]);
    // zero networks with α = 1 give the standard-normal posterior
    let theta: GenerativeParams = serde_json::from_str(&fs::read_to_string(data.join("theta.json")).unwrap()).unwrap();
    let mut phi = Recognition::init(PosteriorKind::Vildsblk, 2, 2, NetShape { hidden: 3, layers: 2 }, 1.0, 0).unwrap();
    let zeros = vec![0.0; phi.num_params()];
    phi.set_params(&zeros).unwrap();
    let model = dir.path().join("model.json");
    ModelFile::new(theta, phi, FitConfig::default()).write(&model).unwrap();
    let out = dir.path().join("eval");
    let (code, text) = vilds(&["eval", "--model", s(&model), "--data", s(&data.join("x.csv")), "--out-dir", s(&out)]);
    assert_eq!(code, 0, "{text}");
    let (header, var) = read_csv(&out.join("posterior_var.csv")).unwrap();
    assert_eq!(header.len(), 4);
    assert_eq!(var, vec![vec![1.0, 0.0, 0.0, 1.0]; 3]);
    let (_, cross) = read_csv(&out.join("posterior_cross.csv")).unwrap();
    assert_eq!(cross.len(), 2);
    assert!(!out.join("comparison.csv").exists());
}

#[test]
fn eval_against_kalman_and_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fit = dir.path().join("fit");
    vilds(&["simulate", "--family", "lds", "--T", "60", "--n", "1", "--m", "3", "--seed", "3", "--out-dir", s(&data)]);
    vilds(&[
        "fit", "--data", s(&data.join("x.csv")), "--family", "lds", "--epochs", "3", "--window", "30",
        "--batches-per-epoch", "5", "--hidden-width", "8", "--layers", "2", "--n", "1", "--out", s(&fit),
    ]);
    let mut outputs = vec![];
    for name in ["e1", "e2"] {
        let out = dir.path().join(name);
        let (code, text) = vilds(&[
            "eval", "--model", s(&fit.join("model.json")), "--data", s(&data.join("x.csv")), "--oracle", "kalman",
            "--out-dir", s(&out),
        ]);
        assert_eq!(code, 0, "{text}");
        let (header, rows) = read_csv(&out.join("comparison.csv")).unwrap();
        assert_eq!(header, ["dim", "r2", "rmse"]);
        assert_eq!(rows.len(), 1);
        outputs.push(
            ["posterior_means.csv", "posterior_var.csv", "posterior_cross.csv", "comparison.csv"]
                .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vilds(&["simulate", "--family", "bogus", "--out-dir", s(dir.path())]).0, 2);
    assert_eq!(vilds(&["frobnicate"]).0, 2);
    assert_eq!(vilds(&["--help"]).0, 0);
    let missing = dir.path().join("missing.csv");
    assert_eq!(vilds(&["fit", "--data", s(&missing), "--family", "lds", "--out", s(dir.path())]).0, 3);
    let data = dir.path().join("plds");
    vilds(&["simulate", "--family", "plds", "--T", "20", "--n", "1", "--m", "2", "--seed", "1", "--out-dir", s(&data)]);
    let fit = dir.path().join("fit");
    let (code, text) = vilds(&[
        "fit", "--data", s(&data.join("x.csv")), "--family", "plds", "--epochs", "1", "--window", "10",
        "--batches-per-epoch", "2", "--hidden-width", "4", "--layers", "2", "--n", "1", "--out", s(&fit),
    ]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = vilds(&[
        "eval", "--model", s(&fit.join("model.json")), "--data", s(&data.join("x.csv")), "--oracle", "kalman",
        "--out-dir", s(&dir.path().join("e")),
    ]);
    assert_eq!(code, 5, "{text}");
    let (code, _) = vilds(&[
        "fit", "--data", s(&data.join("x.csv")), "--family", "plds", "--window", "50", "--out", s(&fit),
    ]);
    assert_eq!(code, 2);
}
