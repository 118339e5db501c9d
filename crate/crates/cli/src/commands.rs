//! `solve`, `sweep` and `decompose`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use osigma_core::fock::decompose_kernel_to_state;
use osigma_core::gap::{closed_form_2p1, Cutoff, GapModel, Phase};
use osigma_core::lattice::build_grid;
use osigma_core::solver::minimize_constrained;
use osigma_core::{Complex64, DMatrix, HermitianKernel, VariationalProblem};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{CutoffKind, Format, RunConfig};
use crate::output::{csv_header, csv_table, json_envelope, json_num, json_row, Cell, Row};
use crate::{CliError, Report};

/// Continuum model matching the configuration.
pub fn gap_model(c: &RunConfig) -> Result<GapModel, CliError> {
    let m = &c.model;
    let cutoff = match m.cutoff {
        CutoffKind::Asymptotic => Cutoff::Asymptotic {
            k_split: m.k_split.unwrap_or(1e3 * m.mu),
        },
        CutoffKind::Hard => Cutoff::Hard {
            k_max: c.grid.k_max,
        },
    };
    GapModel::with_cutoff(m.mu, m.n, m.d, cutoff)
        .map_err(|e| CliError::Config(format!("model: {e}")))
}

fn render(
    c: &RunConfig,
    timestamp: &Value,
    columns: &[&str],
    rows: &[Row],
    extra: Map<String, Value>,
) -> Result<String, CliError> {
    let digits = c.output.precision;
    match c.output.format {
        Format::Csv => Ok(csv_header(c)? + &csv_table(columns, rows, digits)),
        Format::Json => {
            let mut body = Map::new();
            body.insert(
                "records".into(),
                Value::Array(rows.iter().map(|r| json_row(r, digits)).collect()),
            );
            body.extend(extra);
            json_envelope(c, timestamp.clone(), body)
        }
    }
}

const SOLVE_COLUMNS: [&str; 17] = [
    "R2",
    "lambda_grid",
    "lambda_continuum",
    "lambda_diff",
    "within_tol",
    "energy_grid",
    "energy_continuum",
    "phase_grid",
    "phase_continuum",
    "condensate_grid",
    "condensate_continuum",
    "critical_r2",
    "converged",
    "iterations",
    "outer_iterations",
    "feasibility",
    "stationarity",
];

/// Grid solve and continuum gap solution at the same `(μ, N, R², d)`.
pub fn cmd_solve(c: &RunConfig, timestamp: &Value) -> Result<Report, CliError> {
    let m = &c.model;
    let r2 = m.r2.expect("validated");
    let grid = build_grid(
        m.d as usize - 1,
        c.grid.k_max,
        c.grid.n_per_dim,
        c.grid.include_zero(),
    )
    .map_err(|e| CliError::Config(format!("grid: {e}")))?;
    let problem = VariationalProblem::new(Arc::new(grid), m.mu, m.n, r2)
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
    let model = gap_model(c)?;
    log::info!("solving on {} modes", problem.len());
    let sol = minimize_constrained(&problem, &c.solver)
        .map_err(|e| CliError::Run(format!("solver: {e}")))?;
    let cont = if m.d == 3 && m.cutoff == CutoffKind::Asymptotic {
        closed_form_2p1(m.mu, m.n, r2)
    } else {
        model.solve_gap(r2)
    }
    .map_err(|e| CliError::Run(format!("gap equation: {e}")))?;
    let e_cont = model
        .ground_state_energy(cont.lambda, cont.condensate_density)
        .map_err(|e| CliError::Run(format!("gap energy: {e}")))?;
    let rc2 = model
        .critical_radius()
        .map_err(|e| CliError::Run(format!("critical radius: {e}")))?;
    let diff = sol.lambda - cont.lambda;
    let within = diff.abs() <= c.solve.lambda_tol;
    let phase_grid = if sol.condensate_density > 0.0 {
        Phase::Condensed
    } else {
        Phase::Normal
    };
    if !sol.converged {
        log::error!("grid solver did not converge");
    }
    if !within {
        log::warn!(
            "|λ_grid − λ_continuum| = {:e} exceeds solve.lambda_tol = {:e}",
            diff.abs(),
            c.solve.lambda_tol
        );
    }
    let row: Row = vec![
        ("R2", Cell::Num(r2)),
        ("lambda_grid", Cell::Num(sol.lambda)),
        ("lambda_continuum", Cell::Num(cont.lambda)),
        ("lambda_diff", Cell::Num(diff)),
        ("within_tol", Cell::Bool(within)),
        ("energy_grid", Cell::Num(sol.energy)),
        ("energy_continuum", Cell::Num(e_cont)),
        ("phase_grid", Cell::Text(phase_grid.to_string())),
        ("phase_continuum", Cell::Text(cont.phase.to_string())),
        ("condensate_grid", Cell::Num(sol.condensate_density)),
        ("condensate_continuum", Cell::Num(cont.condensate_density)),
        ("critical_r2", Cell::Num(rc2)),
        ("converged", Cell::Bool(sol.converged)),
        ("iterations", Cell::Int(sol.iterations as u64)),
        ("outer_iterations", Cell::Int(sol.outer_iterations as u64)),
        ("feasibility", Cell::Num(sol.feasibility)),
        ("stationarity", Cell::Num(sol.stationarity)),
    ];
    let text = render(c, timestamp, &SOLVE_COLUMNS, &[row], Map::new())?;
    Ok(Report {
        text,
        ok: sol.converged,
    })
}

pub const SWEEP_COLUMNS: [&str; 7] = [
    "R2",
    "lambda",
    "phase",
    "condensate",
    "energy",
    "dE_dR2",
    "residual",
];

/// Continuum phase sweep over `model.R2_list`. Rows that fail are kept
/// in place with phase `failed` and `NaN` values.
pub fn cmd_sweep(c: &RunConfig, timestamp: &Value) -> Result<Report, CliError> {
    let r2 = c.r2_values()?;
    let model = gap_model(c)?;
    let report = model
        .phase_sweep(&r2)
        .map_err(|e| CliError::Run(format!("sweep: {e}")))?;
    let mut ok_rows = report.rows.iter();
    let mut rows = Vec::with_capacity(r2.len());
    for (i, &x) in r2.iter().enumerate() {
        if let Some(f) = report.failures.iter().find(|f| f.index == i) {
            log::error!("sweep row {i} (R² = {x}) failed: {}", f.message);
            rows.push(vec![
                ("R2", Cell::Num(x)),
                ("lambda", Cell::Num(f64::NAN)),
                ("phase", Cell::Text("failed".into())),
                ("condensate", Cell::Num(f64::NAN)),
                ("energy", Cell::Num(f64::NAN)),
                ("dE_dR2", Cell::Num(f64::NAN)),
                ("residual", Cell::Num(f64::NAN)),
            ]);
            continue;
        }
        let r = ok_rows.next().expect("one row per success");
        rows.push(vec![
            ("R2", Cell::Num(r.r2)),
            ("lambda", Cell::Num(r.lambda)),
            ("phase", Cell::Text(r.phase.to_string())),
            ("condensate", Cell::Num(r.condensate)),
            ("energy", Cell::Num(r.energy)),
            ("dE_dR2", Cell::Num(r.de_dr2)),
            ("residual", Cell::Num(r.residual)),
        ]);
    }
    let digits = c.output.precision;
    let mut extra = Map::new();
    extra.insert("critical_r2".into(), json_num(report.critical_r2, digits));
    extra.insert(
        "failures".into(),
        Value::Array(
            report
                .failures
                .iter()
                .map(|f| {
                    let mut o = Map::new();
                    o.insert("index".into(), Value::from(f.index));
                    o.insert("R2".into(), json_num(f.r2, digits));
                    o.insert("message".into(), Value::String(f.message.clone()));
                    Value::Object(o)
                })
                .collect(),
        ),
    );
    extra.insert(
        "transition".into(),
        match &report.transition {
            None => Value::Null,
            Some(t) => {
                let mut o = Map::new();
                for (k, v) in [
                    ("critical_r2", t.critical_r2),
                    ("energy_below", t.energy_below),
                    ("energy_above", t.energy_above),
                    ("slope_below", t.slope_below),
                    ("slope_above", t.slope_above),
                    ("curvature_below", t.curvature_below),
                    ("curvature_above", t.curvature_above),
                    ("mu_sq", t.mu_sq),
                ] {
                    o.insert(k.into(), json_num(v, digits));
                }
                Value::Object(o)
            }
        },
    );
    let text = render(c, timestamp, &SWEEP_COLUMNS, &rows, extra)?;
    Ok(Report {
        text,
        ok: report.failures.is_empty(),
    })
}

/// On-disk kernel: `size` and row-major `[re, im]` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelFile {
    pub size: usize,
    pub entries: Vec<[f64; 2]>,
}

impl KernelFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let k: KernelFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if k.size == 0 || k.entries.len() != k.size * k.size {
            return Err(CliError::Config(format!(
                "{}: size {} needs {} entries, found {}",
                path.display(),
                k.size,
                k.size * k.size,
                k.entries.len()
            )));
        }
        Ok(k)
    }

    /// Kernel on the line grid `build_grid(1, π, size, size odd)`.
    pub fn to_kernel(&self) -> Result<HermitianKernel, CliError> {
        let n = self.size;
        let grid = build_grid(1, PI, n, n % 2 == 1)
            .map_err(|e| CliError::Config(format!("kernel grid: {e}")))?;
        let m = DMatrix::from_fn(n, n, |i, j| {
            let [re, im] = self.entries[i * n + j];
            Complex64::new(re, im)
        });
        HermitianKernel::new(Arc::new(grid), m).map_err(|e| CliError::Run(format!("kernel: {e}")))
    }
}

/// Build a Fock state realising the kernel and report its residual,
/// sector weights and spectrum.
pub fn cmd_decompose(c: &RunConfig, timestamp: &Value) -> Result<Report, CliError> {
    let path =
        c.decompose.kernel.as_deref().ok_or_else(|| {
            CliError::Config("decompose needs --kernel or decompose.kernel".into())
        })?;
    let g = KernelFile::read(path)?.to_kernel()?;
    let d = decompose_kernel_to_state(&g, c.decompose.n_max)
        .map_err(|e| CliError::Run(format!("decompose: {e}")))?;
    if d.flagged {
        log::error!(
            "n_max = {} cannot reproduce the kernel (residual {:e})",
            c.decompose.n_max,
            d.residual
        );
    }
    if let Some(dump) = &c.decompose.dump {
        let text =
            serde_json::to_string_pretty(&d.state.to_dump()).expect("dump serializes") + "\n";
        std::fs::write(dump, text).map_err(|source| CliError::Io {
            path: dump.clone(),
            source,
        })?;
    }
    let mut rows: Vec<Row> = vec![
        vec![
            ("quantity", Cell::Text("residual".into())),
            ("index", Cell::Empty),
            ("value", Cell::Num(d.residual)),
        ],
        vec![
            ("quantity", Cell::Text("flagged".into())),
            ("index", Cell::Empty),
            ("value", Cell::Bool(d.flagged)),
        ],
    ];
    for (i, &w) in d.sector_weights.iter().enumerate() {
        rows.push(vec![
            ("quantity", Cell::Text("sector_weight".into())),
            ("index", Cell::Int(i as u64)),
            ("value", Cell::Num(w)),
        ]);
    }
    for (i, &l) in d.spectrum.iter().enumerate() {
        rows.push(vec![
            ("quantity", Cell::Text("eigenvalue".into())),
            ("index", Cell::Int(i as u64)),
            ("value", Cell::Num(l)),
        ]);
    }
    let digits = c.output.precision;
    let text = match c.output.format {
        Format::Csv => csv_header(c)? + &csv_table(&["quantity", "index", "value"], &rows, digits),
        Format::Json => {
            let mut body = Map::new();
            body.insert("size".into(), Value::from(g.dim()));
            body.insert("n_max".into(), Value::from(c.decompose.n_max));
            body.insert("residual".into(), json_num(d.residual, digits));
            body.insert("flagged".into(), Value::Bool(d.flagged));
            body.insert(
                "sector_weights".into(),
                d.sector_weights
                    .iter()
                    .map(|&w| json_num(w, digits))
                    .collect(),
            );
            body.insert(
                "spectrum".into(),
                d.spectrum.iter().map(|&l| json_num(l, digits)).collect(),
            );
            json_envelope(c, timestamp.clone(), body)?
        }
    };
    Ok(Report {
        text,
        ok: !d.flagged,
    })
}
