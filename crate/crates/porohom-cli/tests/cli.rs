use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use porohom::pipeline::verify_manifest;

const LIMITS_T2_I: &str = r#"
[params.limits]
mu0 = 1.0
nu0 = 0.5
lambda0 = 0.0
p_star = 2.0
eta0 = 1.0
mu1 = "inf"
lambda1 = "inf"
"#;

fn config(geometry: &str, limits: &str, force: &str, t_final: f64) -> String {
    format!(
        r#"output_dir = "out"

[geometry]
{geometry}

[params]
rho_f = 1.0
rho_s = 2.0
{limits}
[numerics]
macro_n = 6
dt = 0.1
t_final = {t_final}

[force]
{force}
"#
    )
}

const CROSS: &str = "kind = \"cross\"\ndim = 2\nn = 8\nwidth = 0.25";
const FLUID: &str = "kind = \"full_fluid\"\ndim = 2\nn = 4";
const SWIRL: &str = "kind = \"swirl\"\namplitude = 1.0\nomega = 2.0";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn porohom(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_porohom"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn regime_lists_t2_i_requirements() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", &config(CROSS, LIMITS_T2_I, "kind = \"zero\"", 0.3));
    let o = porohom(&["regime"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.starts_with("T2_I\n"), "{s}");
    for c in ["A_f0", "B_f0", "B_f1_const", "B_f2_kernel", "C_f0", "a_f0", "a_f1", "a_f2_kernel"] {
        assert!(s.contains(c), "{c} missing from {s}");
    }
}

#[test]
fn regime_t3_iv_requires_two_phase_kernels() {
    let d = tempfile::tempdir().unwrap();
    let limits = LIMITS_T2_I
        .replace("mu0 = 1.0", "mu0 = 0.0")
        .replace("mu1 = \"inf\"", "mu1 = 1.0")
        .replace("lambda1 = \"inf\"", "lambda1 = 1.0");
    let cfg = write_config(d.path(), "c.toml", &config(CROSS, &limits, "kind = \"zero\"", 0.3));
    let o = porohom(&["regime"], &cfg);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.starts_with("T3_IV\n") && s.contains("coefficients: [B_pi_kernel, forcing]"), "{s}");
}

#[test]
fn constraint_violation_exits_with_2_and_names_lambda0() {
    let d = tempfile::tempdir().unwrap();
    let limits = LIMITS_T2_I.replace("lambda0 = 0.0", "lambda0 = 1.0");
    let cfg = write_config(d.path(), "c.toml", &config(CROSS, &limits, "kind = \"zero\"", 0.3));
    let o = porohom(&["regime"], &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("λ₀"), "{}", stderr(&o));
}

#[test]
fn missing_geometry_file_exits_with_2() {
    let d = tempfile::tempdir().unwrap();
    let geo = "kind = \"mask_file\"\npath = \"absent.txt\"";
    let cfg = write_config(d.path(), "c.toml", &config(geo, LIMITS_T2_I, "kind = \"zero\"", 0.3));
    let o = porohom(&["cell"], &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.txt"));
}

#[test]
fn full_fluid_cell_writes_identity_tensor() {
    let d = tempfile::tempdir().unwrap();
    let limits = LIMITS_T2_I.replace("p_star = 2.0", "p_star = \"inf\"");
    let cfg = write_config(d.path(), "c.toml", &config(FLUID, &limits, "kind = \"zero\"", 0.3));
    let o = porohom(&["cell"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.path().join("out/coefficients.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let packed = v["A_f0"]["packed"].as_array().unwrap();
    let want = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]];
    for (i, row) in packed.iter().enumerate() {
        for (j, x) in row.as_array().unwrap().iter().enumerate() {
            assert!((x.as_f64().unwrap() - want[i][j]).abs() < 1e-8, "{packed:?}");
        }
    }
}

#[test]
fn cross_cell_reports_positive_eigenvalue_and_runs_deterministically() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", &config(CROSS, LIMITS_T2_I, SWIRL, 0.5));
    let o = porohom(&["cell", "--workers", "2"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("A_f0 [ok]"), "{s}");
    let text = std::fs::read_to_string(d.path().join("out/coefficients.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let min = v["validations"][0]["min_eigenvalue"].as_f64().unwrap();
    assert!(min > 0.0);

    let o = porohom(&["run"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = std::fs::read(d.path().join("out/series.csv")).unwrap();
    let o = porohom(&["run"], &cfg);
    assert_eq!(o.status.code(), Some(0));
    let second = std::fs::read(d.path().join("out/series.csv")).unwrap();
    assert_eq!(first, second);
    let csv = String::from_utf8(first).unwrap();
    assert_eq!(csv.lines().count(), 2 + 5);
    assert!(csv.lines().nth(1).unwrap().starts_with("step,t,v_l2,v_max,w_l2"));
    let m = verify_manifest(&d.path().join("out")).unwrap();
    assert!(m.files.iter().any(|f| f.path == "series.csv"));
    assert!(m.files.iter().any(|f| f.path == "coefficients.json"));

    // self comparison
    let out = d.path().join("out");
    let o = porohom(&["compare", "--against", out.to_str().unwrap()], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("total 0.000000e0"), "{}", stdout(&o));

    // a second run directory with a different horizon
    let other = write_config(d.path(), "o.toml", &config(CROSS, LIMITS_T2_I, SWIRL, 0.3).replace("\"out\"", "\"other\""));
    assert_eq!(porohom(&["cell"], &other).status.code(), Some(0));
    assert_eq!(porohom(&["run"], &other).status.code(), Some(0));
    let o = porohom(&["compare", "--against", d.path().join("other").to_str().unwrap()], &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("incompatible runs"), "{}", stderr(&o));
}

#[test]
fn zero_force_gives_zero_series() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", &config(CROSS, LIMITS_T2_I, "kind = \"zero\"", 0.3));
    assert_eq!(porohom(&["cell"], &cfg).status.code(), Some(0));
    let o = porohom(&["run"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("out/series.csv")).unwrap();
    for line in csv.lines().skip(2) {
        for v in line.split(',').skip(2) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{line}");
        }
    }
}

#[test]
fn lambda_zero_regime_emits_solid_displacement() {
    let d = tempfile::tempdir().unwrap();
    let limits = LIMITS_T2_I.replace("lambda1 = \"inf\"", "lambda1 = 0.0");
    let cfg = write_config(d.path(), "c.toml", &config(CROSS, &limits, SWIRL, 0.3));
    // the solid cross spans the cell, so (1−m)I − B_s2 is positive definite
    let o = porohom(&["cell"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("(1-m)I - B_s2 [ok]"));
    let o = porohom(&["run"], &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("out/series.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains("w_s_l2"));
    assert!(d.path().join("out/fields/w_s.txt").exists());
}

#[test]
fn coefficients_from_another_geometry_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", &config(CROSS, LIMITS_T2_I, "kind = \"zero\"", 0.3));
    assert_eq!(porohom(&["cell"], &cfg).status.code(), Some(0));
    let changed = config(&CROSS.replace("0.25", "0.5"), LIMITS_T2_I, "kind = \"zero\"", 0.3);
    let cfg2 = write_config(d.path(), "c.toml", &changed);
    let o = porohom(&["run"], &cfg2);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
}

#[test]
fn out_flag_redirects_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", &config(FLUID, &LIMITS_T2_I.replace("p_star = 2.0", "p_star = \"inf\""), "kind = \"zero\"", 0.3));
    let target = d.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_porohom"))
        .args(["cell", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&target)
        .arg("--tol")
        .arg("1e-9")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(target.join("coefficients.json").exists());
    assert!(target.join("manifest.json").exists());
}
