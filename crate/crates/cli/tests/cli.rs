use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn osigma(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osigma"))
        .args(args)
        .current_dir(dir)
        .env_remove("OSIGMA_CONFIG_DIR")
        .env_remove("SOURCE_DATE_EPOCH")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Header and data rows with the `# ` config echo removed.
fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn column<'a>(header: &[String], row: &'a [String], name: &str) -> &'a str {
    &row[header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"))]
}

fn num(header: &[String], row: &[String], name: &str) -> f64 {
    column(header, row, name).parse().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn solve_reproduces_three_quarters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!(
            "[model]\nmu = 1.0\nN = 1\nd = 3\nR2 = {}\n[grid]\nk_max = 20.0\nn_per_dim = 129\n",
            1.0 / (8.0 * PI)
        ),
    );
    let o = osigma(dir.path(), &["solve", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert_eq!(num(&h, r, "lambda_continuum"), 0.75);
    assert!((num(&h, r, "lambda_grid") - 0.75).abs() < 5e-3);
    assert_eq!(column(&h, r, "within_tol"), "true");
    assert_eq!(column(&h, r, "converged"), "true");
    assert_eq!(column(&h, r, "phase_grid"), "normal");
}

#[test]
fn solve_at_zero_radius() {
    let dir = tempfile::tempdir().unwrap();
    let o = osigma(dir.path(), &["solve", "--set", "model.R2=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = csv_rows(&stdout(&o));
    let r = &rows[0];
    for name in [
        "lambda_grid",
        "lambda_continuum",
        "energy_grid",
        "energy_continuum",
    ] {
        assert_eq!(num(&h, r, name), 0.0, "{name}");
    }
}

#[test]
fn solve_in_the_condensed_phase() {
    let dir = tempfile::tempdir().unwrap();
    let rc2 = 1.0 / (4.0 * PI);
    let r2 = format!("model.R2={}", 2.0 * rc2);
    let o = osigma(
        dir.path(),
        &[
            "solve",
            "--set",
            &r2,
            "--set",
            "grid.n_per_dim=129",
            "--format",
            "json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let r = &v["records"][0];
    assert_eq!(r["phase_grid"], "condensed");
    assert_eq!(r["phase_continuum"], "condensed");
    let grid = r["condensate_grid"].as_f64().unwrap();
    let cont = r["condensate_continuum"].as_f64().unwrap();
    assert!((cont - rc2).abs() < 1e-10);
    assert!((grid - cont).abs() < 0.05 * cont, "{grid} vs {cont}");
}

#[test]
fn solver_non_convergence_sets_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let o = osigma(
        dir.path(),
        &[
            "solve",
            "--set",
            "model.R2=0.05",
            "--set",
            "solver.max_outer_iters=1",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let (h, rows) = csv_rows(&stdout(&o));
    assert_eq!(column(&h, &rows[0], "converged"), "false");
}

#[test]
fn sweep_is_monotone_capped_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let rc2 = 1.0 / (4.0 * PI);
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        &format!(
            "seed = 5\n[model]\nR2_linspace = [0.0, {}, 50]\n",
            2.0 * rc2
        ),
    );
    let a = osigma(dir.path(), &["sweep", "--config", &cfg, "--out", "a.csv"]);
    let b = osigma(dir.path(), &["sweep", "--config", &cfg, "--out", "b.csv"]);
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    let ta = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let tb = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    // the echoed output path is the only difference
    assert_eq!(ta.replace("a.csv", "b.csv"), tb);
    let (h, rows) = csv_rows(&ta);
    assert_eq!(
        h.join(","),
        "R2,lambda,phase,condensate,energy,dE_dR2,residual"
    );
    assert_eq!(rows.len(), 50);
    let lambdas: Vec<f64> = rows.iter().map(|r| num(&h, r, "lambda")).collect();
    assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
    assert!(lambdas.iter().all(|&l| l <= 1.0));
    assert_eq!(*lambdas.last().unwrap(), 1.0);
    assert_eq!(column(&h, &rows[0], "phase"), "normal");
    assert_eq!(column(&h, &rows[49], "phase"), "condensed");
}

#[test]
fn json_sweep_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep",
        "--set",
        "model.R2_list=[0.01, 0.05, 0.1]",
        "--format",
        "json",
    ];
    let a = stdout(&osigma(dir.path(), &args));
    let b = stdout(&osigma(dir.path(), &args));
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert!(v["timestamp"].is_null());
    assert_eq!(v["config_echo"]["model"]["R2_list"][1], 0.05);
    assert_eq!(v["records"].as_array().unwrap().len(), 3);
    assert!(v["failures"].as_array().unwrap().is_empty());
}

#[test]
fn source_date_epoch_sets_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_osigma"))
        .args(["sweep", "--set", "model.R2_list=[0.01]", "--format", "json"])
        .current_dir(dir.path())
        .env("SOURCE_DATE_EPOCH", "86400")
        .output()
        .unwrap();
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["timestamp"], "1970-01-02T00:00:00Z");
}

#[test]
fn single_point_sweep_matches_solve() {
    let dir = tempfile::tempdir().unwrap();
    let s = osigma(dir.path(), &["sweep", "--set", "model.R2_list=[0.03]"]);
    let v = osigma(dir.path(), &["solve", "--set", "model.R2=0.03"]);
    let (hs, rs) = csv_rows(&stdout(&s));
    let (hv, rv) = csv_rows(&stdout(&v));
    assert_eq!(rs.len(), 1);
    let ls = num(&hs, &rs[0], "lambda");
    let lv = num(&hv, &rv[0], "lambda_continuum");
    assert!((ls - lv).abs() <= 1e-10, "{ls} vs {lv}");
}

#[test]
fn empty_sweep_list_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = osigma(
        dir.path(),
        &["sweep", "--set", "model.R2_list=[]", "--out", "x.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x.csv").exists());
    assert!(stderr(&o).contains("R2_list"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        "[model]\nmu = 1.0\n\n[grid]\nkmax = 3.0\n",
    );
    let o = osigma(
        dir.path(),
        &["solve", "--config", &cfg, "--set", "model.R2=0.01"],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("kmax") && err.contains("line 5"), "{err}");
}

#[test]
fn mismatched_command_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "command = \"sweep\"\n[model]\nR2 = 0.01\n",
    );
    let o = osigma(dir.path(), &["solve", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_dir_supplies_default_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfgdir = tempfile::tempdir().unwrap();
    fs::write(
        cfgdir.path().join("osigma.toml"),
        "[model]\nR2_list = [0.02]\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_osigma"))
        .arg("sweep")
        .current_dir(dir.path())
        .env("OSIGMA_CONFIG_DIR", cfgdir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = csv_rows(&stdout(&o));
    assert_eq!(rows[0][0], "0.02");
}

#[test]
fn verify_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = osigma(dir.path(), &["verify", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r["passed"] == true));
    let pair = &records[0];
    assert_eq!(pair["suite"], "pair_bound");
    assert_eq!(pair["cases"], 500);
    assert!(pair["worst_margin"].as_f64().unwrap() >= -1e-9);
}

#[test]
fn verify_fault_names_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = osigma(
        dir.path(),
        &[
            "verify",
            "--seed",
            "17",
            "--set",
            "verify.inject_fault=true",
            "--set",
            "verify.suites=[\"pair_bound\", \"quadrature\"]",
            "--format",
            "json",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed 17"), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let f = &v["failures"][0];
    assert_eq!(f["suite"], "pair_bound");
    assert_eq!(f["seed"], 17);
    assert!(f["replay"].as_str().unwrap().contains("--seed 17"));
    assert_eq!(v["records"][1]["passed"], true);
}

fn kernel_file(dir: &Path, name: &str, size: usize, entries: &[[f64; 2]]) -> String {
    let v = serde_json::json!({"size": size, "entries": entries});
    fs::write(dir.join(name), v.to_string()).unwrap();
    name.to_string()
}

fn decompose_json(dir: &Path, kernel: &str, extra: &[&str]) -> (Output, Value) {
    let mut args = vec!["decompose", "--kernel", kernel, "--format", "json"];
    args.extend_from_slice(extra);
    let o = osigma(dir, &args);
    let v = serde_json::from_str(&stdout(&o)).unwrap_or(Value::Null);
    (o, v)
}

#[test]
fn decompose_scalar_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let one = kernel_file(dir.path(), "one.json", 1, &[[1.0, 0.0]]);
    let (o, v) = decompose_json(dir.path(), &one, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(v["residual"].as_f64().unwrap(), 0.0);
    let w: Vec<f64> = v["sector_weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!((w[1] - 1.0).abs() < 1e-12);
    assert!(w
        .iter()
        .enumerate()
        .all(|(n, &x)| n == 1 || x.abs() < 1e-12));

    let half = kernel_file(dir.path(), "half.json", 1, &[[0.5, 0.0]]);
    let (o, v) = decompose_json(dir.path(), &half, &[]);
    assert!(o.status.success());
    assert!((v["sector_weights"][1].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(v["residual"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn decompose_three_mode_kernel_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    // M Mᴴ for a fixed complex M, rescaled to trace 1.2
    let m = [
        [(0.3, 0.1), (-0.2, 0.4), (0.5, 0.0)],
        [(0.1, -0.3), (0.6, 0.2), (-0.1, 0.1)],
        [(0.0, 0.2), (0.2, -0.1), (0.4, 0.3)],
    ];
    let mut g = [[(0.0f64, 0.0f64); 3]; 3];
    for (i, gi) in g.iter_mut().enumerate() {
        for (j, gij) in gi.iter_mut().enumerate() {
            for (&(a, b), &(c, d)) in m[i].iter().zip(&m[j]) {
                // m[i][k] · conj(m[j][k])
                gij.0 += a * c + b * d;
                gij.1 += b * c - a * d;
            }
        }
    }
    let t: f64 = (0..3).map(|i| g[i][i].0).sum();
    let entries: Vec<[f64; 2]> = g
        .iter()
        .flatten()
        .map(|&(re, im)| [re * 1.2 / t, im * 1.2 / t])
        .collect();
    let k = kernel_file(dir.path(), "k3.json", 3, &entries);
    let (o, v) = decompose_json(
        dir.path(),
        &k,
        &[
            "--set",
            "decompose.n_max=5",
            "--set",
            "decompose.dump=\"state.json\"",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(v["residual"].as_f64().unwrap() <= 1e-8);
    assert_eq!(v["flagged"], false);
    let spectrum: f64 = v["spectrum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((spectrum - 1.2).abs() < 1e-9);
    let dump: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("state.json")).unwrap()).unwrap();
    assert_eq!(dump["n_modes"], 3);
    assert_eq!(dump["n_max"], 5);
}

#[test]
fn decompose_rejects_indefinite_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let k = kernel_file(
        dir.path(),
        "bad.json",
        2,
        &[[1.0, 0.0], [2.0, 0.0], [2.0, 0.0], [1.0, 0.0]],
    );
    let o = osigma(dir.path(), &["decompose", "--kernel", &k]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("min eigenvalue"), "{}", stderr(&o));

    let short = kernel_file(dir.path(), "short.json", 2, &[[1.0, 0.0]]);
    let o = osigma(dir.path(), &["decompose", "--kernel", &short]);
    assert_eq!(o.status.code(), Some(2));
}
