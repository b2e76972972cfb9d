//! Machine-readable reports. JSON field names are stable; CSV tables carry
//! a timestamp header line followed by deterministic content.

use serde::Serialize;
use std::path::Path;

use merit_core::{Error, GmmFit, Result, SimReport, WeightingScheme};

#[derive(Debug, Serialize)]
pub struct ThetaReport {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub gamma: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<f64>,
}

impl ThetaReport {
    pub fn from_fit(fit: &GmmFit) -> Self {
        ThetaReport {
            alpha1: fit.theta_hat.alpha1.to_vec(),
            alpha2: fit.theta_hat.alpha2.to_vec(),
            gamma: fit.theta_hat.gamma.to_vec(),
            psi: fit.theta_hat.psi,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct WeightingReport {
    pub kind: String,
    pub covariance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hac_bandwidth: Option<usize>,
}

impl WeightingReport {
    pub fn describe(scheme: &WeightingScheme, n: usize) -> Self {
        let kind = match scheme.kind {
            merit_core::WeightKind::TwoStep => "two_step".to_string(),
            merit_core::WeightKind::Iterated { .. } => "iterated".to_string(),
            merit_core::WeightKind::Cue => "cue".to_string(),
        };
        match scheme.covariance {
            merit_core::CovarianceKind::Iid => WeightingReport {
                kind,
                covariance: "iid".into(),
                hac_bandwidth: None,
            },
            merit_core::CovarianceKind::Hac { bandwidth } => WeightingReport {
                kind,
                covariance: "hac_bartlett".into(),
                hac_bandwidth: Some(bandwidth.resolve(n)),
            },
        }
    }

    pub fn human(&self) -> String {
        match self.hac_bandwidth {
            Some(bw) => format!("{} GMM, {} covariance (bandwidth {bw})", self.kind, self.covariance),
            None => format!("{} GMM, {} covariance", self.kind, self.covariance),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GofReport {
    pub model: String,
    pub j_stat: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Serialize)]
pub struct TestReport {
    pub test: String,
    pub exposure_kind: String,
    pub n: usize,
    pub dropped_rows: usize,
    pub j_stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub theta: ThetaReport,
    pub weighting: WeightingReport,
    pub n_iterations: usize,
    pub converged: bool,
    pub gof: Vec<GofReport>,
    pub warnings: Vec<String>,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub test: String,
    pub exposure_kind: String,
    pub n: usize,
    pub dropped_rows: usize,
    pub psi_hat: f64,
    pub std_err: f64,
    pub j_at_psi_hat: f64,
    pub df: usize,
    pub theta: ThetaReport,
    pub weighting: WeightingReport,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn fit_warnings(fit: &GmmFit) -> Vec<String> {
    fit.warnings
        .iter()
        .map(|w| match w {
            merit_core::FitWarning::NotConverged => {
                "weighting iteration did not converge within the cap".to_string()
            }
            merit_core::FitWarning::JacobianRankDeficient => {
                "moment Jacobian is rank deficient at the optimum; the parameter may not be identified"
                    .to_string()
            }
            merit_core::FitWarning::WeightRidged => {
                "weight matrix needed a ridge to factor".to_string()
            }
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidData(format!("cannot serialize report: {e}")))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::InvalidData(format!("cannot write '{}': {e}", path.display())))
}

/// Writes a CSV table with a timestamp header line and a config-hash line;
/// all content after those two lines is deterministic.
pub fn write_csv_with_header(
    path: &Path,
    config_hash: &str,
    seed: u64,
    body: &str,
) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let text = format!("# generated_at_unix: {now}\n# config_hash: {config_hash} seed: {seed}\n{body}");
    std::fs::write(path, text)
        .map_err(|e| Error::InvalidData(format!("cannot write '{}': {e}", path.display())))
}

/// Deterministic JSON wrapper for a simulation report.
#[derive(Debug, Serialize)]
pub struct SimReportJson<'a> {
    pub config_hash: &'a str,
    pub seed: u64,
    pub rows: &'a [merit_core::SimCell],
}

/// The profiled objective as a small CSV table.
pub fn profile_csv(profile: &[(f64, f64)]) -> String {
    let mut out = String::from("psi,j_stat\n");
    for (psi, j) in profile {
        out.push_str(&format!("{psi},{j}\n"));
    }
    out
}

pub fn sim_report_csv(report: &SimReport) -> String {
    report.to_csv_string()
}
