//! Declarative analysis and experiment configuration: a single TOML file
//! with nested sections, overridable by command-line flags. Column
//! references use CSV header names; they are resolved to indices when the
//! data file is loaded.

use serde::Deserialize;
use sha2::{Digest, Sha256};

use merit_core::{BasisSpec, DesignMap, Error, ExposureKind, OutcomeLink, Result};

/// Top-level configuration file. Analysis commands read `[data]`,
/// `[model]`, `[instruments]`, and `[test]`; the experiment commands read
/// `[simulate]` / `[power]`.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub data: Option<DataConfig>,
    pub model: Option<ModelConfig>,
    pub instruments: Option<InstrumentsConfig>,
    pub test: Option<TestConfig>,
    pub estimate: Option<EstimateConfig>,
    pub simulate: Option<ExperimentConfig>,
    pub power: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub outcome: String,
    pub exposure: String,
    #[serde(default)]
    pub error_free: Vec<String>,
    #[serde(default)]
    pub error_prone: Vec<String>,
    /// Optional time column; must also be listed in `error_free` to enter
    /// the model bases (it is referenced by the auto instruments and the
    /// HAC ordering check).
    pub time: Option<String>,
    #[serde(default = "default_exposure_kind")]
    pub exposure_kind: ExposureKind,
    #[serde(default)]
    pub missing: MissingPolicy,
}

fn default_exposure_kind() -> ExposureKind {
    ExposureKind::Continuous
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Any unparseable or missing cell in a used column is an error.
    #[default]
    Error,
    /// Rows with missing cells in used columns are dropped (count reported).
    DropRow,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Exposure baseline basis `g_a1`.
    #[serde(default)]
    pub g_a1: Vec<BasisTerm>,
    /// Interaction basis `g_a2` (defaults to a constant: no interaction).
    #[serde(default)]
    pub g_a2: Vec<BasisTerm>,
    /// Outcome mean basis `g_y`.
    #[serde(default)]
    pub g_y: Vec<BasisTerm>,
    /// Score basis for gamma (defaults to the `g_y` basis).
    #[serde(default)]
    pub score: Vec<BasisTerm>,
    #[serde(default = "default_link")]
    pub outcome_link: OutcomeLink,
}

fn default_link() -> OutcomeLink {
    OutcomeLink::Identity
}

/// One declarative basis term with named columns.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisTerm {
    /// A single all-ones column.
    Constant,
    Polynomial {
        column: String,
        degree: usize,
        #[serde(default)]
        intercept: bool,
    },
    Fourier {
        column: String,
        period: f64,
        n_harmonics: usize,
        #[serde(default)]
        intercept: bool,
    },
    Dummy {
        column: String,
        levels: usize,
    },
    /// Monomial over named columns, e.g. `"temp^2"` or `"temp*rh"`.
    Custom {
        expr: String,
        #[serde(default)]
        intercept: bool,
    },
    Interaction {
        left: Box<BasisTerm>,
        right: Box<BasisTerm>,
    },
}

impl BasisTerm {
    /// Resolves column names to indices into the error-free covariate block.
    pub fn resolve(&self, columns: &[String]) -> Result<BasisSpec> {
        let find = |name: &str| -> Result<usize> {
            columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::InvalidConfig(format!(
                    "basis references column '{name}', which is not an error-free covariate"
                )))
        };
        Ok(match self {
            BasisTerm::Constant => BasisSpec::constant(),
            BasisTerm::Polynomial {
                column,
                degree,
                intercept,
            } => BasisSpec::polynomial(find(column)?, *degree, *intercept),
            BasisTerm::Fourier {
                column,
                period,
                n_harmonics,
                intercept,
            } => BasisSpec::fourier(find(column)?, *period, *n_harmonics, *intercept),
            BasisTerm::Dummy { column, levels } => BasisSpec::dummy(find(column)?, *levels),
            BasisTerm::Custom { expr, intercept } => {
                let resolved = resolve_expr(expr, columns)?;
                BasisSpec::custom(&resolved, *intercept)
            }
            BasisTerm::Interaction { left, right } => BasisSpec {
                kind: merit_core::BasisKind::Interaction {
                    left: Box::new(left.resolve(columns)?),
                    right: Box::new(right.resolve(columns)?),
                },
                include_intercept: false,
            },
        })
    }
}

/// Rewrites `name^k * name2 ...` with column names into the index form
/// `c<i>^k*c<j>` understood by the basis evaluator.
fn resolve_expr(expr: &str, columns: &[String]) -> Result<String> {
    let mut parts = Vec::new();
    for factor in expr.split('*') {
        let factor = factor.trim();
        let (name, power) = match factor.split_once('^') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (factor, None),
        };
        let idx = columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidConfig(format!(
                "expression '{expr}' references column '{name}', which is not an error-free covariate"
            )))?;
        match power {
            Some(p) => parts.push(format!("c{idx}^{p}")),
            None => parts.push(format!("c{idx}")),
        }
    }
    Ok(parts.join("*"))
}

/// Resolves a list of terms into a design map.
pub fn resolve_terms(terms: &[BasisTerm], columns: &[String]) -> Result<DesignMap> {
    let resolved: Result<Vec<BasisSpec>> = terms.iter().map(|t| t.resolve(columns)).collect();
    Ok(DesignMap::new(resolved?))
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InstrumentsConfig {
    #[serde(default)]
    pub mode: InstrumentMode,
    pub ell: Option<InstrumentSpecConfig>,
    pub m: Option<InstrumentSpecConfig>,
    pub k: Option<InstrumentSpecConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentMode {
    /// Mirror the reference data-analysis choices (q = 1); see the command
    /// documentation for the exact forms.
    #[default]
    Auto,
    /// Use the explicitly configured `ell` / `m` / `k` maps.
    Explicit,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentSpecConfig {
    #[serde(default)]
    pub terms: Vec<BasisTerm>,
    /// An identically-zero block of this dimension (alternative to terms).
    pub zero: Option<usize>,
    #[serde(default)]
    pub orthonormalize: bool,
    /// Optional column subset (after orthonormalization).
    pub columns: Option<Vec<usize>>,
}

impl InstrumentSpecConfig {
    pub fn resolve(&self, columns: &[String]) -> Result<merit_core::Instruments> {
        if let Some(dim) = self.zero {
            if !self.terms.is_empty() {
                return Err(Error::InvalidConfig(
                    "instrument spec cannot set both `zero` and `terms`".into(),
                ));
            }
            return Ok(merit_core::Instruments::Zero(dim));
        }
        if self.terms.is_empty() {
            return Err(Error::InvalidConfig(
                "instrument spec needs `terms` or `zero`".into(),
            ));
        }
        let mut map = resolve_terms(&self.terms, columns)?;
        map.orthonormalize = self.orthonormalize;
        map.columns = self.columns.clone();
        Ok(merit_core::Instruments::Map(map))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    pub kind: RobustTestKind,
    #[serde(default)]
    pub weighting: WeightingName,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Newey-West bandwidth: "auto", or a nonnegative integer. Absent means
    /// iid weighting.
    pub hac_bandwidth: Option<toml::Value>,
    #[serde(default = "default_alpha")]
    pub alpha_level: f64,
    #[serde(default)]
    pub gof: bool,
}

fn default_max_iter() -> usize {
    50
}

fn default_tol() -> f64 {
    1e-8
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustTestKind {
    Rps,
    Ror,
    Dr,
}

impl RobustTestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RobustTestKind::Rps => "rps",
            RobustTestKind::Ror => "ror",
            RobustTestKind::Dr => "dr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingName {
    TwoStep,
    #[default]
    Iterated,
    Cue,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Explicit search grid; overrides the automatic one.
    pub psi_grid: Option<Vec<f64>>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_half_width")]
    pub half_width_ses: f64,
}

fn default_grid_points() -> usize {
    41
}

fn default_half_width() -> f64 {
    10.0
}

/// Shared configuration of the `simulate` and `power` commands.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub n_reps: usize,
    pub seed: u64,
    pub taus: Vec<f64>,
    #[serde(default)]
    pub regimes: Vec<String>,
    pub tests: Vec<String>,
    #[serde(default)]
    pub psi0: f64,
    #[serde(default)]
    pub psi_grid: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha_level: f64,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("cannot parse config: {e}")))
    }
}

/// Hex SHA-256 of the raw configuration bytes, embedded in every report.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn parse_regime(name: &str) -> Result<merit_core::Regime> {
    match name {
        "both_correct" => Ok(merit_core::Regime::BothCorrect),
        "outcome_correct" => Ok(merit_core::Regime::OutcomeCorrect),
        "exposure_correct" => Ok(merit_core::Regime::ExposureCorrect),
        other => Err(Error::InvalidConfig(format!("unknown regime '{other}'"))),
    }
}
