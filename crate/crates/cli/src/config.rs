//! Run configuration: a TOML file with one section per concern.
//!
//! Every struct rejects unknown keys. Values are layered as defaults,
//! then the file, then `--set section.key=value` overrides, then the
//! dedicated flags (`--seed`, `--out`, `--format`).

use std::fmt;
use std::path::{Path, PathBuf};

use osigma_core::SolverOptions;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the directory searched for relative
/// `--config` paths and for the fallback `osigma.toml`.
pub const CONFIG_DIR_ENV: &str = "OSIGMA_CONFIG_DIR";
pub const DEFAULT_CONFIG_NAME: &str = "osigma.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Solve,
    Sweep,
    Verify,
    Decompose,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Solve => "solve",
            Command::Sweep => "sweep",
            Command::Verify => "verify",
            Command::Decompose => "decompose",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffKind {
    Asymptotic,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mu: f64,
    #[serde(rename = "N")]
    pub n: u32,
    /// Spacetime dimension.
    pub d: u32,
    #[serde(rename = "R2", skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(rename = "R2_list", skip_serializing_if = "Option::is_none")]
    pub r2_list: Option<Vec<f64>>,
    /// `[start, stop, points]`, endpoints included.
    #[serde(rename = "R2_linspace", skip_serializing_if = "Option::is_none")]
    pub r2_linspace: Option<(f64, f64, usize)>,
    /// Continuum cutoff. `hard` truncates at `grid.k_max` and is required
    /// for `d = 4`.
    pub cutoff: CutoffKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_split: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mu: 1.0,
            n: 1,
            d: 3,
            r2: None,
            r2_list: None,
            r2_linspace: None,
            cutoff: CutoffKind::Asymptotic,
            k_split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub k_max: f64,
    pub n_per_dim: usize,
    /// Defaults to `n_per_dim` odd.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_zero: Option<bool>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            k_max: 20.0,
            n_per_dim: 65,
            include_zero: None,
        }
    }
}

impl GridConfig {
    pub fn include_zero(&self) -> bool {
        self.include_zero.unwrap_or(self.n_per_dim % 2 == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    /// Allowed `|λ_grid − λ_continuum|`.
    pub lambda_tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { lambda_tol: 5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub format: Format,
    /// Significant digits.
    pub precision: usize,
    /// Written verbatim into the JSON envelope. `SOURCE_DATE_EPOCH` is
    /// used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            path: None,
            format: Format::Csv,
            precision: 12,
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    PairBound,
    Decomposition,
    Diagonality,
    Quadrature,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::PairBound,
        Suite::Decomposition,
        Suite::Diagonality,
        Suite::Quadrature,
        Suite::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::PairBound => "pair_bound",
            Suite::Decomposition => "decomposition",
            Suite::Diagonality => "diagonality",
            Suite::Quadrature => "quadrature",
            Suite::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub suites: Vec<Suite>,
    /// Random Fock states for the pair-bound suite.
    pub states: usize,
    pub pair_modes: usize,
    pub pair_n_max: usize,
    pub kernels: usize,
    pub kernel_n_max: usize,
    pub perturbations: usize,
    pub gap_cases: usize,
    pub oracle_n_max: usize,
    /// Test hook: flip the sign of the measured `A` kernel before the
    /// pair-bound check.
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            suites: Suite::ALL.to_vec(),
            states: 500,
            pair_modes: 3,
            pair_n_max: 3,
            kernels: 30,
            kernel_n_max: 6,
            perturbations: 30,
            gap_cases: 200,
            oracle_n_max: 8,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<PathBuf>,
    pub n_max: usize,
    /// Optional JSON dump of the constructed Fock state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump: Option<PathBuf>,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            kernel: None,
            n_max: 5,
            dump: None,
        }
    }
}

/// Resolve the config file: an explicit path (tried as given, then
/// relative to `$OSIGMA_CONFIG_DIR`), or `$OSIGMA_CONFIG_DIR/osigma.toml`
/// if it exists.
pub fn locate(
    explicit: Option<&Path>,
    config_dir: Option<&Path>,
) -> Result<Option<PathBuf>, CliError> {
    match explicit {
        Some(p) if p.exists() => Ok(Some(p.to_path_buf())),
        Some(p) => {
            if let Some(dir) = config_dir.filter(|_| p.is_relative()) {
                let candidate = dir.join(p);
                if candidate.exists() {
                    return Ok(Some(candidate));
                }
            }
            Err(CliError::Config(format!(
                "config file {} not found",
                p.display()
            )))
        }
        None => Ok(config_dir
            .map(|d| d.join(DEFAULT_CONFIG_NAME))
            .filter(|p| p.exists())),
    }
}

/// Parse `section.key=value`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Config(format!(
            "override `{spec}` is not of the form section.key=value"
        ))
    })?;
    let path: Vec<String> = key
        .trim()
        .split('.')
        .map(|s| s.trim().to_string())
        .collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!(
            "override `{spec}` has an empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn apply_override(
    table: &mut toml::Table,
    path: &[String],
    value: toml::Value,
) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override key `{}`: `{seg}` is not a section",
                path.join(".")
            ))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Build the configuration from file text (if any) and overrides.
pub fn load(text: Option<(&str, &Path)>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match text {
        Some((src, path)) => {
            // typed parse first so that errors carry line and column
            toml::from_str::<RunConfig>(src)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(src)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        apply_override(&mut table, &path, value)?;
    }
    toml::Value::Table(table)
        .try_into::<RunConfig>()
        .map_err(|e| CliError::Config(format!("after overrides {overrides:?}: {e}")))
}

fn finite_positive(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{name} must be positive and finite (got {x})"
        )))
    }
}

fn check_r2(name: &str, x: f64) -> Result<(), CliError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{name} must be finite and nonnegative (got {x})"
        )))
    }
}

impl RunConfig {
    /// Checks shared by all commands plus the command-specific ones.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        if let Some(c) = self.command {
            if c != command {
                return Err(CliError::Config(format!(
                    "config is for `{c}` but `{command}` was requested"
                )));
            }
        }
        let m = &self.model;
        finite_positive("model.mu", m.mu)?;
        if m.n == 0 {
            return Err(CliError::Config("model.N must be at least 1".into()));
        }
        if !(2..=4).contains(&m.d) {
            return Err(CliError::Config(format!(
                "model.d must be 2, 3 or 4 (got {})",
                m.d
            )));
        }
        if m.d == 4 && m.cutoff != CutoffKind::Hard {
            return Err(CliError::Config(
                "model.d = 4 has a cutoff-dependent gap equation; set model.cutoff = \"hard\""
                    .into(),
            ));
        }
        if let Some(k) = m.k_split {
            finite_positive("model.k_split", k)?;
        }
        finite_positive("grid.k_max", self.grid.k_max)?;
        if self.grid.n_per_dim == 0 {
            return Err(CliError::Config("grid.n_per_dim must be at least 1".into()));
        }
        if self.grid.include_zero() != (self.grid.n_per_dim % 2 == 1) {
            return Err(CliError::Config(format!(
                "grid.include_zero = {} does not match the parity of grid.n_per_dim = {}",
                self.grid.include_zero(),
                self.grid.n_per_dim
            )));
        }
        self.solver
            .validate()
            .map_err(|e| CliError::Config(format!("solver: {e}")))?;
        if !(1..=17).contains(&self.output.precision) {
            return Err(CliError::Config(format!(
                "output.precision must be between 1 and 17 (got {})",
                self.output.precision
            )));
        }
        match command {
            Command::Solve => {
                let r2 =
                    m.r2.ok_or_else(|| CliError::Config("solve needs model.R2".into()))?;
                check_r2("model.R2", r2)?;
                if !(self.solve.lambda_tol >= 0.0 && self.solve.lambda_tol.is_finite()) {
                    return Err(CliError::Config(
                        "solve.lambda_tol must be finite and nonnegative".into(),
                    ));
                }
                if m.d == 4 && self.solver.far_field {
                    return Err(CliError::Config(
                        "the analytic far field covers d = 2 and 3 only; set solver.far_field = false".into(),
                    ));
                }
            }
            Command::Sweep => {
                let list = self.r2_values()?;
                if list.is_empty() {
                    return Err(CliError::Config(
                        "sweep needs a nonempty model.R2_list".into(),
                    ));
                }
                for (i, &x) in list.iter().enumerate() {
                    check_r2(&format!("model.R2_list[{i}]"), x)?;
                }
                if let Some(i) = list.windows(2).position(|w| !(w[0] < w[1])) {
                    return Err(CliError::Config(format!(
                        "model.R2_list must be strictly increasing (entries {i} and {})",
                        i + 1
                    )));
                }
            }
            Command::Verify => {
                let v = &self.verify;
                if v.suites.is_empty() {
                    return Err(CliError::Config("verify.suites is empty".into()));
                }
                if !(1..=3).contains(&v.pair_modes) {
                    return Err(CliError::Config(
                        "verify.pair_modes must be 1, 2 or 3".into(),
                    ));
                }
            }
            Command::Decompose => {}
        }
        Ok(())
    }

    /// The sweep abscissae from `R2_list` or `R2_linspace`.
    pub fn r2_values(&self) -> Result<Vec<f64>, CliError> {
        match (&self.model.r2_list, self.model.r2_linspace) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "model.R2_list and model.R2_linspace are mutually exclusive".into(),
            )),
            (Some(list), None) => Ok(list.clone()),
            (None, Some((a, b, n))) => Ok(match n {
                0 => Vec::new(),
                1 => vec![a],
                _ => (0..n)
                    .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
                    .collect(),
            }),
            (None, None) => Ok(Vec::new()),
        }
    }

    /// TOML rendering used for the artifact header.
    pub fn echo_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot echo config: {e}")))
    }
}
