//! End-to-end tests of the `qca` binary: file formats, exit codes, report
//! contents, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use num_complex::Complex64;
use serde_json::Value;
use tempfile::TempDir;

use qca_cli::formats::{
    matrix_to_dto, qlga_from_dto, qlga_to_dto, rule_to_dto, state_to_dto, FactorDto, MatrixDto,
    QlgaDto, TermDto,
};
use qca_core::evolution::EvolutionHandle;
use qca_core::heisenberg::gamma_rule;
use qca_core::lattice::{Configuration, Neighborhood, Site, SparseState};
use qca_core::rng::SeededRng;
use qca_core::samples;
use qca_core::{CMatrix, Tolerances};

fn line01() -> Neighborhood {
    Neighborhood::line(&[0, 1]).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qca"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, value: &impl serde::Serialize) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

fn identity_dto(dim: usize) -> MatrixDto {
    matrix_to_dto(&CMatrix::identity(dim))
}

/// One-dimensional lattice gas whose only nontrivial factor sits at offset
/// +1 with a trivial collision: a lone excitation advects one site toward
/// −1 every step.
fn mover_model() -> QlgaDto {
    QlgaDto {
        n: 1,
        neighborhood: vec![vec![0], vec![1]],
        factors: vec![
            FactorDto { offset: vec![0], dim: 1, q: 0 },
            FactorDto { offset: vec![1], dim: 2, q: 0 },
        ],
        collision: identity_dto(2),
    }
}

/// Lattice gas on offsets {0, 1} with two qubit factors and a SWAP
/// collision.
fn swap_model() -> QlgaDto {
    let mut swap = CMatrix::zeros(4, 4);
    swap[(0, 0)] = Complex64::new(1.0, 0.0);
    swap[(1, 2)] = Complex64::new(1.0, 0.0);
    swap[(2, 1)] = Complex64::new(1.0, 0.0);
    swap[(3, 3)] = Complex64::new(1.0, 0.0);
    QlgaDto {
        n: 1,
        neighborhood: vec![vec![0], vec![1]],
        factors: vec![
            FactorDto { offset: vec![0], dim: 2, q: 0 },
            FactorDto { offset: vec![1], dim: 2, q: 0 },
        ],
        collision: matrix_to_dto(&swap),
    }
}

/// Single-site model that does nothing: one offset, identity collision.
fn identity_model(d: usize) -> QlgaDto {
    QlgaDto {
        n: 1,
        neighborhood: vec![vec![0]],
        factors: vec![FactorDto { offset: vec![0], dim: d, q: 0 }],
        collision: identity_dto(d),
    }
}

/// One-term basis state at the given sites/values.
fn basis_terms(pairs: &[(i64, u32)]) -> Vec<TermDto> {
    let config =
        Configuration::from_pairs(pairs.iter().map(|&(x, v)| (Site::new(vec![x]), v))).unwrap();
    let d = pairs.iter().map(|&(_, v)| v + 1).max().unwrap_or(1).max(2);
    let st = SparseState::from_terms(1, d as usize, [(config, Complex64::new(1.0, 0.0))]).unwrap();
    state_to_dto(&st)
}

fn read_csv(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("trajectory.csv"))
        .expect("trajectory.csv written")
        .lines()
        .map(str::to_string)
        .collect()
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[test]
fn simulate_mover_translates_one_site_per_step() {
    let tmp = TempDir::new().unwrap();
    let model = write(tmp.path(), "model.json", &mover_model());
    let state = write(tmp.path(), "state.json", &basis_terms(&[(0, 1)]));
    let out = tmp.path().join("run");
    let res = run(&[
        "simulate",
        "--model", model.to_str().unwrap(),
        "--state", state.to_str().unwrap(),
        "--steps", "5",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    for k in 0..=5 {
        assert!(out.join(format!("step_{k:04}.json")).exists(), "step {k} file");
    }
    let csv = read_csv(&out);
    assert_eq!(csv[0], "step,site,mass");
    let expect: Vec<String> = (0..=5).map(|k| format!("{k},{},1", -k)).collect();
    assert_eq!(&csv[1..], &expect[..], "unit mass advects one site per step");
}

#[test]
fn simulate_swap_zigzag_advances_one_site_every_two_steps() {
    let tmp = TempDir::new().unwrap();
    let model = write(tmp.path(), "model.json", &swap_model());
    let state = write(tmp.path(), "state.json", &basis_terms(&[(0, 1)]));
    let out = tmp.path().join("run");
    let res = run(&[
        "simulate",
        "--model", model.to_str().unwrap(),
        "--state", state.to_str().unwrap(),
        "--steps", "6",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = read_csv(&out);
    // The excitation alternates between the two sub-cells of a site, so the
    // site index decreases by one every other step.
    let expect: Vec<String> = std::iter::once("0,0,1".to_string())
        .chain((1..=6).map(|k| format!("{k},{},1", -((k + 1) / 2))))
        .collect();
    assert_eq!(&csv[1..], &expect[..]);
}

#[test]
fn simulate_identity_model_trajectory_is_constant() {
    let tmp = TempDir::new().unwrap();
    let model = write(tmp.path(), "model.json", &identity_model(3));
    let state = write(tmp.path(), "state.json", &basis_terms(&[(2, 2)]));
    let out = tmp.path().join("run");
    let res = run(&[
        "simulate",
        "--model", model.to_str().unwrap(),
        "--state", state.to_str().unwrap(),
        "--steps", "4",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0);
    let csv = read_csv(&out);
    let expect: Vec<String> = (0..=4).map(|k| format!("{k},2,1")).collect();
    assert_eq!(&csv[1..], &expect[..]);
}

#[test]
fn simulate_all_quiescent_state_stays_vacuum() {
    let tmp = TempDir::new().unwrap();
    let model = write(tmp.path(), "model.json", &swap_model());
    let state = write(tmp.path(), "state.json", &state_to_dto(&SparseState::vacuum(1, 4)));
    let out = tmp.path().join("run");
    let res = run(&[
        "simulate",
        "--model", model.to_str().unwrap(),
        "--state", state.to_str().unwrap(),
        "--steps", "3",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0);
    // |∅⟩ has no occupied site: every step file holds the same single term
    // with an empty configuration, and the CSV has no data rows.
    assert_eq!(read_csv(&out), vec!["step,site,mass".to_string()]);
    for k in 0..=3 {
        let text = std::fs::read_to_string(out.join(format!("step_{k:04}.json"))).unwrap();
        let terms: Vec<TermDto> = serde_json::from_str(&text).unwrap();
        assert_eq!(terms.len(), 1);
        assert!(terms[0].config.sites.is_empty());
        assert!((terms[0].re - 1.0).abs() < 1e-12 && terms[0].im.abs() < 1e-12);
    }
}

#[test]
fn simulate_rejects_non_unitary_collision_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let mut bad = mover_model();
    bad.collision.re[0][0] = 0.5;
    let model = write(tmp.path(), "model.json", &bad);
    let state = write(tmp.path(), "state.json", &basis_terms(&[(0, 1)]));
    let out = tmp.path().join("run");
    let res = run(&[
        "simulate",
        "--model", model.to_str().unwrap(),
        "--state", state.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2, "model invariant violations exit 2");
    assert!(!out.exists(), "no partial output on failure");
}

#[test]
fn simulate_term_cap_exhaustion_exits_3_and_writes_nothing() {
    // A Hadamard-like collision doubles the superposition every step.
    let h = 0.5f64.sqrt();
    let mut coin = CMatrix::identity(4);
    for (i, j, v) in [
        (1usize, 1usize, h), (1, 2, h), (2, 1, h), (2, 2, -h),
    ] {
        coin[(i, j)] = Complex64::new(v, 0.0);
    }
    let model_dto = QlgaDto {
        n: 1,
        neighborhood: vec![vec![0], vec![1]],
        factors: vec![
            FactorDto { offset: vec![0], dim: 2, q: 0 },
            FactorDto { offset: vec![1], dim: 2, q: 0 },
        ],
        collision: matrix_to_dto(&coin),
    };
    let tmp = TempDir::new().unwrap();
    let model = write(tmp.path(), "model.json", &model_dto);
    let state = write(tmp.path(), "state.json", &basis_terms(&[(0, 1)]));
    let out = tmp.path().join("run");
    let res = run(&[
        "simulate",
        "--model", model.to_str().unwrap(),
        "--state", state.to_str().unwrap(),
        "--steps", "12",
        "--term-cap", "16",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 3, "term-cap exhaustion exits 3");
    assert!(!out.exists(), "no partial trajectory on failure");
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

#[test]
fn check_valid_qlga_passes_with_zero_phase() {
    let mut rng = SeededRng::new(4242);
    let model = samples::random_qlga(line01(), &[2, 3], &mut rng).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "model.json", &qlga_to_dto(&model));
    let res = run(&["check", "--model", path.to_str().unwrap(), "--seed", "7"]);
    let report = stdout_json(&res);
    assert_eq!(report["pass"], Value::Bool(true));
    assert_eq!(report["rule"]["pass"], Value::Bool(true));
    let theta = report["translation"][0]["theta"].as_f64().unwrap();
    assert!(theta.abs() < 1e-8, "lattice gases are strictly invariant, θ = {theta}");
    assert_eq!(report["causality_forward"]["pass"], Value::Bool(true));
    assert_eq!(report["causality_backward"]["pass"], Value::Bool(true));
    assert_eq!(report["reversibility"]["pass"], Value::Bool(true));
}

#[test]
fn check_identity_model_passes() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "model.json", &identity_model(2));
    let res = run(&["check", "--model", path.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = stdout_json(&res);
    assert_eq!(report["pass"], Value::Bool(true));
}

#[test]
fn check_underdeclared_neighborhood_fails_causality_with_exit_1() {
    // A genuine two-layer brickwork whose file claims the evolution is
    // strictly on-site. The constructor takes the declaration on trust;
    // the checks must catch the lie.
    let mut rng = SeededRng::new(99);
    let b1 = samples::random_collision(4, &mut rng);
    let b2 = samples::random_collision(4, &mut rng);
    let dto = serde_json::json!({
        "n": 1,
        "d": 2,
        "neighborhood": [[0]],
        "layers": [
            { "shape": [[0], [1]], "block": matrix_to_dto(&b1), "step": [2], "offset": [0] },
            { "shape": [[0], [1]], "block": matrix_to_dto(&b2), "step": [2], "offset": [1] },
        ],
    });
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "model.json", &dto);
    let out = tmp.path().join("report.json");
    let res = run(&[
        "check",
        "--model", path.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 1, "failed checks exit 1");
    let report: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["pass"], Value::Bool(false));
    assert_eq!(
        report["causality_forward"]["pass"],
        Value::Bool(false),
        "the too-small neighborhood shows up as a causality violation"
    );
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

fn rule_file(dir: &Path, name: &str, handle: &EvolutionHandle) -> PathBuf {
    let tol = Tolerances::default();
    let rule = gamma_rule(handle, &tol).unwrap();
    write(dir, name, &rule_to_dto(&rule))
}

#[test]
fn detect_qlga_rule_recovers_dims() {
    let mut rng = SeededRng::new(314);
    let model = samples::random_qlga(line01(), &[2, 3], &mut rng).unwrap();
    let handle = EvolutionHandle::from_qlga(model);
    let tmp = TempDir::new().unwrap();
    let path = rule_file(tmp.path(), "rule.json", &handle);
    let res = run(&["detect", "--rule", path.to_str().unwrap(), "--seed", "5"]);
    let report = stdout_json(&res);
    assert_eq!(report["qlga"], Value::Bool(true));
    assert_eq!(report["dims"], serde_json::json!([2, 3]));
    assert_eq!(report["rank"], serde_json::json!(36));
    assert!(report["S"].is_object() && report["F"].is_object());
    let residuals = report["residuals"].as_object().expect("stage → value map");
    for stage in ["patch", "condition", "factorize", "collision", "verify"] {
        assert!(residuals.contains_key(stage), "missing stage {stage}");
    }
}

#[test]
fn detect_circuit_rule_reports_not_qlga_with_exit_0() {
    let mut rng = SeededRng::new(77);
    let circ = samples::brickwork_circuit(2, &mut rng).unwrap();
    let handle = EvolutionHandle::from_circuit(circ);
    let tmp = TempDir::new().unwrap();
    let path = rule_file(tmp.path(), "rule.json", &handle);
    let res = run(&["detect", "--rule", path.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "a negative verdict is data, not an error");
    let report = stdout_json(&res);
    assert_eq!(report["qlga"], Value::Bool(false));
    assert!(report.get("S").is_none() && report.get("F").is_none());
}

#[test]
fn detect_identity_rule_is_trivially_qlga() {
    let handle = EvolutionHandle::from_qlga(
        qlga_from_dto(&identity_model(2), &Tolerances::default()).unwrap(),
    );
    let tmp = TempDir::new().unwrap();
    let path = rule_file(tmp.path(), "rule.json", &handle);
    let res = run(&["detect", "--rule", path.to_str().unwrap()]);
    let report = stdout_json(&res);
    assert_eq!(report["qlga"], Value::Bool(true));
    assert_eq!(report["dims"], serde_json::json!([2]));
}

// ---------------------------------------------------------------------------
// intertwine
// ---------------------------------------------------------------------------

#[test]
fn intertwine_identity_rule_yields_identity() {
    let handle = EvolutionHandle::from_qlga(
        qlga_from_dto(&identity_model(2), &Tolerances::default()).unwrap(),
    );
    let tmp = TempDir::new().unwrap();
    let path = rule_file(tmp.path(), "rule.json", &handle);
    let res = run(&["intertwine", "--rule", path.to_str().unwrap(), "--window", "3"]);
    let report = stdout_json(&res);
    assert!(report["residual"].as_f64().unwrap() < 1e-10);
    let r = &report["R"];
    assert_eq!(r["dim"].as_u64(), Some(8));
    for i in 0..8 {
        for j in 0..8 {
            let re = r["re"][i][j].as_f64().unwrap();
            let im = r["im"][i][j].as_f64().unwrap();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((re - want).abs() < 1e-10 && im.abs() < 1e-10);
        }
    }
}

#[test]
fn intertwine_qlga_rule_meets_residual_and_uniqueness() {
    let mut rng = SeededRng::new(2718);
    let model = samples::random_qlga(line01(), &[2, 2], &mut rng).unwrap();
    let handle = EvolutionHandle::from_qlga(model);
    let tmp = TempDir::new().unwrap();
    let path = rule_file(tmp.path(), "rule.json", &handle);
    let res = run(&["intertwine", "--rule", path.to_str().unwrap(), "--window", "3"]);
    let report = stdout_json(&res);
    assert!(report["R"].is_object(), "a lattice gas has a window intertwiner");
    assert!(report["residual"].as_f64().unwrap() <= 1e-8);
    assert!((report["uniqueness"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(report["phase_convention"], "largest-entry-positive-real");
}

#[test]
fn intertwine_broken_rule_fails_validation_with_exit_1() {
    // Corrupt one image of a legitimate rule: γ(e_01) ← 2·γ(e_01) breaks
    // the *-homomorphism property but keeps the file well-formed.
    let mut rng = SeededRng::new(1618);
    let model = samples::random_qlga(line01(), &[1, 2], &mut rng).unwrap();
    let handle = EvolutionHandle::from_qlga(model);
    let tol = Tolerances::default();
    let rule = gamma_rule(&handle, &tol).unwrap();
    let mut dto = rule_to_dto(&rule);
    for row in &mut dto.images[1].op.matrix.re {
        for x in row.iter_mut() {
            *x *= 2.0;
        }
    }
    for row in &mut dto.images[1].op.matrix.im {
        for x in row.iter_mut() {
            *x *= 2.0;
        }
    }
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "rule.json", &dto);
    let res = run(&["intertwine", "--rule", path.to_str().unwrap()]);
    assert_eq!(code(&res), 1);
    let msg = String::from_utf8_lossy(&res.stderr);
    assert!(msg.contains("validation"), "stderr names the failure: {msg}");
}

// ---------------------------------------------------------------------------
// plumbing: determinism, seeds, exit codes
// ---------------------------------------------------------------------------

#[test]
fn reports_are_byte_identical_across_runs() {
    let mut rng = SeededRng::new(555);
    let model = samples::random_qlga(line01(), &[2, 2], &mut rng).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "model.json", &qlga_to_dto(&model));
    let args = [
        "check",
        "--model", path.to_str().unwrap(),
        "--seed", "12",
        "--trials", "8",
    ];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout, "same inputs + seed + tolerances ⇒ same bytes");

    let handle = EvolutionHandle::from_qlga(
        qlga_from_dto(&qlga_to_dto(
            &samples::random_qlga(line01(), &[2, 2], &mut rng).unwrap(),
        ), &Tolerances::default()).unwrap(),
    );
    let rule = rule_file(tmp.path(), "rule.json", &handle);
    let dargs = ["detect", "--rule", rule.to_str().unwrap(), "--seed", "3"];
    let da = run(&dargs);
    let db = run(&dargs);
    assert_eq!(da.stdout, db.stdout);
}

#[test]
fn seed_falls_back_to_env_then_zero() {
    let mut rng = SeededRng::new(808);
    let model = samples::random_qlga(line01(), &[2, 2], &mut rng).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "model.json", &qlga_to_dto(&model));
    let args = ["check", "--model", path.to_str().unwrap(), "--trials", "4"];

    let env_run = bin()
        .args(args)
        .env("QCA_CORR_SEED", "31")
        .output()
        .unwrap();
    let flag_run = run(&["check", "--model", path.to_str().unwrap(), "--trials", "4", "--seed", "31"]);
    assert_eq!(env_run.stdout, flag_run.stdout, "env fallback equals explicit flag");

    let bare = bin().args(args).env_remove("QCA_CORR_SEED").output().unwrap();
    let report: Value = serde_json::from_slice(&bare.stdout).unwrap();
    assert_eq!(report["seed"], serde_json::json!(0), "documented default");
}

#[test]
fn tolerance_overrides_are_applied_and_reported() {
    let tmp = TempDir::new().unwrap();
    let path = write(tmp.path(), "model.json", &identity_model(2));
    let res = run(&[
        "check",
        "--model", path.to_str().unwrap(),
        "--tol", "rank=1e-7",
        "--tol", "causality=1e-6",
    ]);
    let report = stdout_json(&res);
    assert_eq!(report["tolerances"]["rank"], serde_json::json!(1e-7));
    assert_eq!(report["tolerances"]["causality"], serde_json::json!(1e-6));

    let bad = run(&["check", "--model", path.to_str().unwrap(), "--tol", "sharpness=1"]);
    assert_eq!(code(&bad), 1, "unknown tolerance name is a usage error");
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&run(&["check"])), 1, "missing --model/--rule");
    assert_eq!(code(&run(&["--definitely-not-a-flag"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["simulate", "--help"])), 0);
}
