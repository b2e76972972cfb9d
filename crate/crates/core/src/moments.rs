//! Per-observation moment vectors for every robust test family.
//!
//! A [`MomentSystem`] pairs exposure/outcome model bases with analyst-chosen
//! instrument functions of the error-free covariates and produces, for each
//! observation, the stacked moment vector whose population mean is zero at
//! the true parameter under the null of no treatment effect. Binding a
//! system to a dataset evaluates all bases once; the bound form exposes
//! moment matrices, means, and analytic Jacobians to the GMM layer.

use ndarray::{Array1, Array2};

use crate::basis::DesignMap;
use crate::dataset::{Dataset, ExposureKind};
use crate::error::{Error, Result};
use crate::linalg;

/// Largest exponent fed to `exp` before reporting overflow.
const EXP_CAP: f64 = 700.0;

/// Relative singular-value tolerance for instrument rank checks.
const INSTRUMENT_RANK_TOL: f64 = 1e-10;

/// The moment families. The continuous-exposure trio comes first; the
/// remaining kinds are the discrete-exposure extensions. No robust-OR or
/// doubly-robust construction exists for binary exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    /// Robust propensity-score moments `{l(C)Y + m(C)} * D_A(alpha)`.
    Rps,
    /// Robust outcome-regression moments `k(C) D_Y(gamma) {A - X'g_a2}`
    /// stacked over the outcome score.
    Ror,
    /// Doubly-robust moments: `k(C) D_Y D_A` over `{l(C)Y + m(C)} D_A`
    /// over the outcome score.
    Dr,
    /// Binary-exposure propensity-score moments
    /// `{l(C)Y + m(C)} exp(-a2'X A) [A - expit(g_a1)]`.
    RpsBinary,
    /// Count-exposure propensity-score moments
    /// `{l(C)Y + m(C)} [A - exp(g_a1 + a2'X)]`.
    RpsCount,
    /// Count-exposure robust-OR moments `k(C) D_Y A exp(-a2'X)` over the score.
    RorCount,
    /// Count-exposure doubly-robust moments with
    /// `D_A = A exp(-a2'X) - exp(g_a1)`.
    DrCount,
}

impl MomentKind {
    pub fn exposure_kind(self) -> ExposureKind {
        match self {
            MomentKind::Rps | MomentKind::Ror | MomentKind::Dr => ExposureKind::Continuous,
            MomentKind::RpsBinary => ExposureKind::Binary,
            MomentKind::RpsCount | MomentKind::RorCount | MomentKind::DrCount => {
                ExposureKind::Count
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MomentKind::Rps => "rps",
            MomentKind::Ror => "ror",
            MomentKind::Dr => "dr",
            MomentKind::RpsBinary => "rps_binary",
            MomentKind::RpsCount => "rps_count",
            MomentKind::RorCount => "ror_count",
            MomentKind::DrCount => "dr_count",
        }
    }
}

/// Link for the outcome mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLink {
    Identity,
    Log,
}

/// Outcome mean model: a basis over the error-free covariates plus a link.
/// The outcome residual is always `Y` minus the inverse-link-transformed
/// linear predictor.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OutcomeModel {
    pub map: DesignMap,
    pub link: OutcomeLink,
}

impl OutcomeModel {
    pub fn identity(map: DesignMap) -> Self {
        OutcomeModel {
            map,
            link: OutcomeLink::Identity,
        }
    }

    pub fn log(map: DesignMap) -> Self {
        OutcomeModel {
            map,
            link: OutcomeLink::Log,
        }
    }
}

/// An instrument function of the error-free covariates: either a declarative
/// basis map, an identically-zero block of a given dimension, or a
/// precomputed per-observation matrix (used for plug-in optimal instruments
/// and for instrument-recombination checks).
#[derive(Debug, Clone, PartialEq)]
pub enum Instruments {
    Map(DesignMap),
    Zero(usize),
    Matrix(Array2<f64>),
}

impl Instruments {
    pub fn dim(&self) -> usize {
        match self {
            Instruments::Map(map) => map.dim(),
            Instruments::Zero(d) => *d,
            Instruments::Matrix(m) => m.ncols(),
        }
    }

    fn evaluate(&self, data: &Dataset) -> Result<Array2<f64>> {
        match self {
            Instruments::Map(map) => Ok(map.evaluate(data)?.values),
            Instruments::Zero(d) => Ok(Array2::zeros((data.n(), *d))),
            Instruments::Matrix(m) => {
                if m.nrows() != data.n() {
                    return Err(Error::DimensionMismatch {
                        what: "instrument matrix rows".into(),
                        expected: data.n(),
                        found: m.nrows(),
                    });
                }
                Ok(m.clone())
            }
        }
    }
}

/// Dimensions of the stacked parameter vector
/// `theta = [alpha1, alpha2, gamma]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    /// Coefficients of the exposure baseline `g_a1`.
    pub p1: usize,
    /// Error-prone covariate count.
    pub d_x: usize,
    /// Basis dimension of the interaction map `g_a2` (1 means no
    /// covariate interaction).
    pub m2: usize,
    /// Coefficients of the outcome model `g_y`.
    pub dim_gamma: usize,
}

impl ParamLayout {
    pub fn p2(&self) -> usize {
        self.d_x * self.m2
    }

    /// `p = p1 + p2`, the exposure-model dimension.
    pub fn p(&self) -> usize {
        self.p1 + self.p2()
    }

    pub fn total(&self) -> usize {
        self.p() + self.dim_gamma
    }
}

/// Model parameters, stored by block. `alpha2` is flattened with the
/// error-prone-covariate index major: coefficient `(j, s)` of `X_j * b2_s(C)`
/// sits at `j * m2 + s`. `psi` is carried only on effect-estimation output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub alpha1: Array1<f64>,
    pub alpha2: Array1<f64>,
    pub gamma: Array1<f64>,
    pub psi: Option<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParamVector {
            alpha1: Array1::zeros(layout.p1),
            alpha2: Array1::zeros(layout.p2()),
            gamma: Array1::zeros(layout.dim_gamma),
            psi: None,
        }
    }

    pub fn from_flat(layout: ParamLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector".into(),
                expected: layout.total(),
                found: flat.len(),
            });
        }
        let p1 = layout.p1;
        let p2 = layout.p2();
        Ok(ParamVector {
            alpha1: Array1::from_iter(flat[..p1].iter().copied()),
            alpha2: Array1::from_iter(flat[p1..p1 + p2].iter().copied()),
            gamma: Array1::from_iter(flat[p1 + p2..].iter().copied()),
            psi: None,
        })
    }

    pub fn to_flat(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(self.alpha1.iter());
        out.extend(self.alpha2.iter());
        out.extend(self.gamma.iter());
        Array1::from(out)
    }

    pub fn dim(&self) -> usize {
        self.alpha1.len() + self.alpha2.len() + self.gamma.len()
    }

    fn check(&self, layout: ParamLayout) -> Result<()> {
        if self.alpha1.len() != layout.p1 {
            return Err(Error::DimensionMismatch {
                what: "alpha1".into(),
                expected: layout.p1,
                found: self.alpha1.len(),
            });
        }
        if self.alpha2.len() != layout.p2() {
            return Err(Error::DimensionMismatch {
                what: "alpha2".into(),
                expected: layout.p2(),
                found: self.alpha2.len(),
            });
        }
        if self.gamma.len() != layout.dim_gamma {
            return Err(Error::DimensionMismatch {
                what: "gamma".into(),
                expected: layout.dim_gamma,
                found: self.gamma.len(),
            });
        }
        Ok(())
    }
}

/// A complete moment-system specification. Construct through the per-kind
/// builders, which enforce the dimension bookkeeping of each family:
/// the stacked moment dimension always exceeds the parameter dimension by
/// exactly the overidentification degree `q`.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    kind: MomentKind,
    g_a1: Option<DesignMap>,
    g_a2: Option<DesignMap>,
    outcome: Option<OutcomeModel>,
    score: Option<DesignMap>,
    ell: Option<Instruments>,
    m: Option<Instruments>,
    k: Option<Instruments>,
    d_x: usize,
    layout: ParamLayout,
    q: usize,
}

impl MomentSystem {
    /// Robust propensity-score system (continuous exposure).
    ///
    /// `ell` and `m` must share a common dimension `p + q` with `q >= 0`;
    /// `q >= 1` gives an overidentified system that can be used as a test.
    pub fn rps(
        g_a1: DesignMap,
        g_a2: DesignMap,
        ell: Instruments,
        m: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        let layout = ParamLayout {
            p1: g_a1.dim(),
            d_x,
            m2: g_a2.dim(),
            dim_gamma: 0,
        };
        let dim_z = ell.dim();
        if m.dim() != dim_z {
            return Err(Error::DimensionMismatch {
                what: "instrument m".into(),
                expected: dim_z,
                found: m.dim(),
            });
        }
        if dim_z < layout.p() {
            return Err(Error::Unidentified(format!(
                "instruments have dimension {dim_z} but the exposure model has {} parameters",
                layout.p()
            )));
        }
        let q = dim_z - layout.p();
        Ok(MomentSystem {
            kind: MomentKind::Rps,
            g_a1: Some(g_a1),
            g_a2: Some(g_a2),
            outcome: None,
            score: None,
            ell: Some(ell),
            m: Some(m),
            k: None,
            d_x,
            layout,
            q,
        })
    }

    /// Robust outcome-regression system (continuous exposure).
    ///
    /// `k` must have dimension `p2 + q`; the score basis must exactly
    /// identify `gamma`. When `score` is `None` the outcome-model basis is
    /// used as its own score basis.
    pub fn ror(
        g_a2: DesignMap,
        outcome: OutcomeModel,
        score: Option<DesignMap>,
        k: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        let layout = ParamLayout {
            p1: 0,
            d_x,
            m2: g_a2.dim(),
            dim_gamma: outcome.map.dim(),
        };
        let score = score.unwrap_or_else(|| outcome.map.clone());
        check_score_dim(&score, layout.dim_gamma)?;
        if k.dim() < layout.p2() {
            return Err(Error::Unidentified(format!(
                "instrument k has dimension {} but alpha2 has {} parameters",
                k.dim(),
                layout.p2()
            )));
        }
        let q = k.dim() - layout.p2();
        Ok(MomentSystem {
            kind: MomentKind::Ror,
            g_a1: None,
            g_a2: Some(g_a2),
            outcome: Some(outcome),
            score: Some(score),
            ell: None,
            m: None,
            k: Some(k),
            d_x,
            layout,
            q,
        })
    }

    /// Doubly-robust system (continuous exposure). `ell` and `m` must have
    /// dimension `p1`; `k` must have dimension `p2 + q`.
    #[allow(clippy::too_many_arguments)]
    pub fn dr(
        g_a1: DesignMap,
        g_a2: DesignMap,
        outcome: OutcomeModel,
        score: Option<DesignMap>,
        ell: Instruments,
        m: Instruments,
        k: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        let layout = ParamLayout {
            p1: g_a1.dim(),
            d_x,
            m2: g_a2.dim(),
            dim_gamma: outcome.map.dim(),
        };
        let score = score.unwrap_or_else(|| outcome.map.clone());
        check_score_dim(&score, layout.dim_gamma)?;
        if ell.dim() != layout.p1 {
            return Err(Error::DimensionMismatch {
                what: "instrument ell".into(),
                expected: layout.p1,
                found: ell.dim(),
            });
        }
        if m.dim() != layout.p1 {
            return Err(Error::DimensionMismatch {
                what: "instrument m".into(),
                expected: layout.p1,
                found: m.dim(),
            });
        }
        if k.dim() < layout.p2() {
            return Err(Error::Unidentified(format!(
                "instrument k has dimension {} but alpha2 has {} parameters",
                k.dim(),
                layout.p2()
            )));
        }
        let q = k.dim() - layout.p2();
        Ok(MomentSystem {
            kind: MomentKind::Dr,
            g_a1: Some(g_a1),
            g_a2: Some(g_a2),
            outcome: Some(outcome),
            score: Some(score),
            ell: Some(ell),
            m: Some(m),
            k: Some(k),
            d_x,
            layout,
            q,
        })
    }

    /// Binary-exposure propensity-score system. The exposure model is a
    /// logit baseline in the error-free covariates plus a linear term in the
    /// error-prone covariates (no covariate interaction).
    pub fn rps_binary(
        g_a1: DesignMap,
        ell: Instruments,
        m: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        Self::discrete_rps(MomentKind::RpsBinary, g_a1, ell, m, d_x)
    }

    /// Count-exposure propensity-score system (log-linear exposure model).
    pub fn rps_count(
        g_a1: DesignMap,
        ell: Instruments,
        m: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        Self::discrete_rps(MomentKind::RpsCount, g_a1, ell, m, d_x)
    }

    fn discrete_rps(
        kind: MomentKind,
        g_a1: DesignMap,
        ell: Instruments,
        m: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        let layout = ParamLayout {
            p1: g_a1.dim(),
            d_x,
            m2: 1,
            dim_gamma: 0,
        };
        let dim_z = ell.dim();
        if m.dim() != dim_z {
            return Err(Error::DimensionMismatch {
                what: "instrument m".into(),
                expected: dim_z,
                found: m.dim(),
            });
        }
        if dim_z < layout.p() {
            return Err(Error::Unidentified(format!(
                "instruments have dimension {dim_z} but the exposure model has {} parameters",
                layout.p()
            )));
        }
        let q = dim_z - layout.p();
        Ok(MomentSystem {
            kind,
            g_a1: Some(g_a1),
            g_a2: None,
            outcome: None,
            score: None,
            ell: Some(ell),
            m: Some(m),
            k: None,
            d_x,
            layout,
            q,
        })
    }

    /// Count-exposure robust outcome-regression system.
    pub fn ror_count(
        outcome: OutcomeModel,
        score: Option<DesignMap>,
        k: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        let layout = ParamLayout {
            p1: 0,
            d_x,
            m2: 1,
            dim_gamma: outcome.map.dim(),
        };
        let score = score.unwrap_or_else(|| outcome.map.clone());
        check_score_dim(&score, layout.dim_gamma)?;
        if k.dim() < layout.p2() {
            return Err(Error::Unidentified(format!(
                "instrument k has dimension {} but alpha2 has {} parameters",
                k.dim(),
                layout.p2()
            )));
        }
        let q = k.dim() - layout.p2();
        Ok(MomentSystem {
            kind: MomentKind::RorCount,
            g_a1: None,
            g_a2: None,
            outcome: Some(outcome),
            score: Some(score),
            ell: None,
            m: None,
            k: Some(k),
            d_x,
            layout,
            q,
        })
    }

    /// Count-exposure doubly-robust system.
    pub fn dr_count(
        g_a1: DesignMap,
        outcome: OutcomeModel,
        score: Option<DesignMap>,
        ell: Instruments,
        m: Instruments,
        k: Instruments,
        d_x: usize,
    ) -> Result<Self> {
        let layout = ParamLayout {
            p1: g_a1.dim(),
            d_x,
            m2: 1,
            dim_gamma: outcome.map.dim(),
        };
        let score = score.unwrap_or_else(|| outcome.map.clone());
        check_score_dim(&score, layout.dim_gamma)?;
        if ell.dim() != layout.p1 {
            return Err(Error::DimensionMismatch {
                what: "instrument ell".into(),
                expected: layout.p1,
                found: ell.dim(),
            });
        }
        if m.dim() != layout.p1 {
            return Err(Error::DimensionMismatch {
                what: "instrument m".into(),
                expected: layout.p1,
                found: m.dim(),
            });
        }
        if k.dim() < layout.p2() {
            return Err(Error::Unidentified(format!(
                "instrument k has dimension {} but alpha2 has {} parameters",
                k.dim(),
                layout.p2()
            )));
        }
        let q = k.dim() - layout.p2();
        Ok(MomentSystem {
            kind: MomentKind::DrCount,
            g_a1: Some(g_a1),
            g_a2: None,
            outcome: Some(outcome),
            score: Some(score),
            ell: Some(ell),
            m: Some(m),
            k: Some(k),
            d_x,
            layout,
            q,
        })
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    /// Overidentification degree: moment dimension minus parameter dimension.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn dim_u(&self) -> usize {
        self.layout.total() + self.q
    }

    pub fn exposure_kind(&self) -> ExposureKind {
        self.kind.exposure_kind()
    }

    pub fn score_map(&self) -> Option<&DesignMap> {
        self.score.as_ref()
    }

    pub fn outcome_model(&self) -> Option<&OutcomeModel> {
        self.outcome.as_ref()
    }

    pub fn g_a1_map(&self) -> Option<&DesignMap> {
        self.g_a1.as_ref()
    }

    pub fn g_a2_map(&self) -> Option<&DesignMap> {
        self.g_a2.as_ref()
    }

    /// Evaluates every basis and instrument against `data`, runs the sample
    /// rank checks, and returns the bound form used for fitting.
    pub fn bind(&self, data: &Dataset) -> Result<BoundSystem> {
        if data.dim_x() != self.d_x {
            return Err(Error::DimensionMismatch {
                what: "error-prone covariate columns".into(),
                expected: self.d_x,
                found: data.dim_x(),
            });
        }
        data.check_exposure(self.exposure_kind())?;
        let n = data.n();

        let b1 = self
            .g_a1
            .as_ref()
            .map(|map| map.evaluate(data).map(|m| m.values))
            .transpose()?;
        let b2 = match (&self.g_a2, self.kind.exposure_kind()) {
            (Some(map), _) => Some(map.evaluate(data)?.values),
            // Discrete kinds have no covariate interaction: constant map.
            (None, ExposureKind::Binary | ExposureKind::Count) => Some(Array2::ones((n, 1))),
            (None, ExposureKind::Continuous) => None,
        };
        let by = self
            .outcome
            .as_ref()
            .map(|o| o.map.evaluate(data).map(|m| m.values))
            .transpose()?;
        let sb = self
            .score
            .as_ref()
            .map(|map| map.evaluate(data).map(|m| m.values))
            .transpose()?;
        let zl = self.ell.as_ref().map(|i| i.evaluate(data)).transpose()?;
        let zm = self.m.as_ref().map(|i| i.evaluate(data)).transpose()?;
        let zk = self.k.as_ref().map(|i| i.evaluate(data)).transpose()?;

        // z(C, Y) = l(C) Y + m(C), fixed across parameter values.
        let z = match (&zl, &zm) {
            (Some(l), Some(m)) => {
                let mut z = m.clone();
                for i in 0..n {
                    let y = data.y[i];
                    for j in 0..l.ncols() {
                        z[[i, j]] += l[[i, j]] * y;
                    }
                }
                Some(z)
            }
            _ => None,
        };

        if let Some(z) = &z {
            let dim = z.ncols();
            if linalg::rank(z, INSTRUMENT_RANK_TOL) < dim {
                return Err(Error::RankDeficient {
                    column: "elements of l(C)Y + m(C)".into(),
                });
            }
        }
        if let Some(k) = &zk {
            if linalg::rank(k, INSTRUMENT_RANK_TOL) < k.ncols() {
                return Err(Error::RankDeficient {
                    column: "elements of k(C)".into(),
                });
            }
        }

        Ok(BoundSystem {
            kind: self.kind,
            layout: self.layout,
            q: self.q,
            link: self.outcome.as_ref().map(|o| o.link),
            y: data.y.clone(),
            a: data.a.clone(),
            x: data.x.clone(),
            b1,
            b2,
            by,
            sb,
            z,
            zk,
        })
    }
}

fn check_score_dim(score: &DesignMap, dim_gamma: usize) -> Result<()> {
    if score.dim() != dim_gamma {
        return Err(Error::DimensionMismatch {
            what: "score basis (gamma must be exactly identified)".into(),
            expected: dim_gamma,
            found: score.dim(),
        });
    }
    Ok(())
}

/// A moment system evaluated against one dataset. All methods are pure in
/// the parameters; rows of the moment matrix depend only on the matching
/// observation.
#[derive(Debug, Clone)]
pub struct BoundSystem {
    kind: MomentKind,
    layout: ParamLayout,
    q: usize,
    link: Option<OutcomeLink>,
    y: Array1<f64>,
    a: Array1<f64>,
    x: Array2<f64>,
    /// Exposure baseline basis, `n x p1`.
    b1: Option<Array2<f64>>,
    /// Interaction basis, `n x m2`.
    b2: Option<Array2<f64>>,
    /// Outcome model basis, `n x dim_gamma`.
    by: Option<Array2<f64>>,
    /// Score basis, `n x dim_gamma`.
    sb: Option<Array2<f64>>,
    /// Evaluated `l(C) Y + m(C)`, `n x (p + q)` or `n x p1`.
    z: Option<Array2<f64>>,
    /// Evaluated `k(C)`, `n x (p2 + q)`.
    zk: Option<Array2<f64>>,
}

impl BoundSystem {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn dim_u(&self) -> usize {
        self.layout.total() + self.q
    }

    /// Linear predictor of the exposure baseline at row `i`.
    fn g1(&self, i: usize, alpha1: &Array1<f64>) -> f64 {
        match &self.b1 {
            Some(b1) => b1.row(i).dot(alpha1),
            None => 0.0,
        }
    }

    /// Interaction coefficients evaluated at row `i`: the vector
    /// `g_a2(C_i)` with one entry per error-prone covariate.
    fn g2(&self, i: usize, alpha2: &Array1<f64>) -> Vec<f64> {
        let b2 = self.b2.as_ref().expect("system has an interaction map");
        let m2 = self.layout.m2;
        (0..self.layout.d_x)
            .map(|j| {
                let mut acc = 0.0;
                for s in 0..m2 {
                    acc += b2[[i, s]] * alpha2[j * m2 + s];
                }
                acc
            })
            .collect()
    }

    /// `X_i' g_a2(C_i)`.
    fn xg2(&self, i: usize, alpha2: &Array1<f64>) -> f64 {
        let g2 = self.g2(i, alpha2);
        g2.iter()
            .enumerate()
            .map(|(j, v)| self.x[[i, j]] * v)
            .sum()
    }

    /// Continuous exposure residual `A - g_a1 - X'g_a2` at row `i`.
    fn delta_a_continuous(&self, i: usize, theta: &ParamVector) -> f64 {
        self.a[i] - self.g1(i, &theta.alpha1) - self.xg2(i, &theta.alpha2)
    }

    /// Count exposure residual `A exp(-a2'X) - exp(g_a1)` at row `i`.
    fn delta_a_count(&self, i: usize, theta: &ParamVector) -> Result<f64> {
        let e1 = -self.alpha2_dot_x(i, &theta.alpha2);
        let e2 = self.g1(i, &theta.alpha1);
        if e1 > EXP_CAP || e2 > EXP_CAP {
            return Err(Error::ExpOverflow { row: i });
        }
        Ok(self.a[i] * e1.exp() - e2.exp())
    }

    fn alpha2_dot_x(&self, i: usize, alpha2: &Array1<f64>) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.layout.d_x {
            acc += alpha2[j] * self.x[[i, j]];
        }
        acc
    }

    /// Outcome residual `Y - inverse_link(g_y)` at row `i`, plus the value
    /// `d(D_Y)/d(linear predictor)` used by the Jacobian.
    fn delta_y(&self, i: usize, gamma: &Array1<f64>) -> Result<(f64, f64)> {
        let by = self.by.as_ref().expect("system has an outcome model");
        let lin = by.row(i).dot(gamma);
        match self.link.expect("system has an outcome link") {
            OutcomeLink::Identity => Ok((self.y[i] - lin, -1.0)),
            OutcomeLink::Log => {
                if lin > EXP_CAP {
                    return Err(Error::ExpOverflow { row: i });
                }
                let mu = lin.exp();
                Ok((self.y[i] - mu, -mu))
            }
        }
    }

    /// The `n x dim_u` moment matrix at `theta`; row `i` depends only on
    /// observation `i`.
    pub fn moment_matrix(&self, theta: &ParamVector) -> Result<Array2<f64>> {
        theta.check(self.layout)?;
        let n = self.n();
        let mut out = Array2::zeros((n, self.dim_u()));
        for i in 0..n {
            self.fill_row(i, theta, &mut out)?;
        }
        Ok(out)
    }

    fn fill_row(&self, i: usize, theta: &ParamVector, out: &mut Array2<f64>) -> Result<()> {
        match self.kind {
            MomentKind::Rps => {
                let z = self.z.as_ref().unwrap();
                let d = self.delta_a_continuous(i, theta);
                for j in 0..z.ncols() {
                    out[[i, j]] = z[[i, j]] * d;
                }
            }
            MomentKind::Ror => {
                let zk = self.zk.as_ref().unwrap();
                let sb = self.sb.as_ref().unwrap();
                let (dy, _) = self.delta_y(i, &theta.gamma)?;
                let r = self.a[i] - self.xg2(i, &theta.alpha2);
                let dk = zk.ncols();
                for j in 0..dk {
                    out[[i, j]] = zk[[i, j]] * dy * r;
                }
                for g in 0..sb.ncols() {
                    out[[i, dk + g]] = sb[[i, g]] * dy;
                }
            }
            MomentKind::Dr => {
                let zk = self.zk.as_ref().unwrap();
                let z = self.z.as_ref().unwrap();
                let sb = self.sb.as_ref().unwrap();
                let (dy, _) = self.delta_y(i, &theta.gamma)?;
                let d = self.delta_a_continuous(i, theta);
                let dk = zk.ncols();
                let dz = z.ncols();
                for j in 0..dk {
                    out[[i, j]] = zk[[i, j]] * dy * d;
                }
                for j in 0..dz {
                    out[[i, dk + j]] = z[[i, j]] * d;
                }
                for g in 0..sb.ncols() {
                    out[[i, dk + dz + g]] = sb[[i, g]] * dy;
                }
            }
            MomentKind::RpsBinary => {
                let z = self.z.as_ref().unwrap();
                let arg = -self.alpha2_dot_x(i, &theta.alpha2) * self.a[i];
                if arg > EXP_CAP {
                    return Err(Error::ExpOverflow { row: i });
                }
                let w = arg.exp();
                let e = self.a[i] - expit(self.g1(i, &theta.alpha1));
                for j in 0..z.ncols() {
                    out[[i, j]] = z[[i, j]] * w * e;
                }
            }
            MomentKind::RpsCount => {
                let z = self.z.as_ref().unwrap();
                let arg = self.g1(i, &theta.alpha1) + self.alpha2_dot_x(i, &theta.alpha2);
                if arg > EXP_CAP {
                    return Err(Error::ExpOverflow { row: i });
                }
                let resid = self.a[i] - arg.exp();
                for j in 0..z.ncols() {
                    out[[i, j]] = z[[i, j]] * resid;
                }
            }
            MomentKind::RorCount => {
                let zk = self.zk.as_ref().unwrap();
                let sb = self.sb.as_ref().unwrap();
                let (dy, _) = self.delta_y(i, &theta.gamma)?;
                let arg = -self.alpha2_dot_x(i, &theta.alpha2);
                if arg > EXP_CAP {
                    return Err(Error::ExpOverflow { row: i });
                }
                let t = self.a[i] * arg.exp();
                let dk = zk.ncols();
                for j in 0..dk {
                    out[[i, j]] = zk[[i, j]] * dy * t;
                }
                for g in 0..sb.ncols() {
                    out[[i, dk + g]] = sb[[i, g]] * dy;
                }
            }
            MomentKind::DrCount => {
                let zk = self.zk.as_ref().unwrap();
                let z = self.z.as_ref().unwrap();
                let sb = self.sb.as_ref().unwrap();
                let (dy, _) = self.delta_y(i, &theta.gamma)?;
                let d = self.delta_a_count(i, theta)?;
                let dk = zk.ncols();
                let dz = z.ncols();
                for j in 0..dk {
                    out[[i, j]] = zk[[i, j]] * dy * d;
                }
                for j in 0..dz {
                    out[[i, dk + j]] = z[[i, j]] * d;
                }
                for g in 0..sb.ncols() {
                    out[[i, dk + dz + g]] = sb[[i, g]] * dy;
                }
            }
        }
        Ok(())
    }

    /// Mean moment vector over observations.
    pub fn mean_moments(&self, theta: &ParamVector) -> Result<Array1<f64>> {
        let m = self.moment_matrix(theta)?;
        Ok(m.mean_axis(ndarray::Axis(0)).unwrap())
    }

    /// Analytic mean Jacobian `d mean_moments / d theta`, `dim_u x dim_theta`.
    pub fn mean_jacobian(&self, theta: &ParamVector) -> Result<Array2<f64>> {
        theta.check(self.layout)?;
        let n = self.n();
        let dim_u = self.dim_u();
        let dim_t = self.layout.total();
        let p1 = self.layout.p1;
        let p2 = self.layout.p2();
        let m2 = self.layout.m2;
        let mut jac = Array2::zeros((dim_u, dim_t));

        for i in 0..n {
            match self.kind {
                MomentKind::Rps => {
                    let z = self.z.as_ref().unwrap();
                    let b1 = self.b1.as_ref().unwrap();
                    let b2 = self.b2.as_ref().unwrap();
                    for r in 0..z.ncols() {
                        let zi = z[[i, r]];
                        for c in 0..p1 {
                            jac[[r, c]] -= zi * b1[[i, c]];
                        }
                        for j in 0..self.layout.d_x {
                            for s in 0..m2 {
                                jac[[r, p1 + j * m2 + s]] -= zi * self.x[[i, j]] * b2[[i, s]];
                            }
                        }
                    }
                }
                MomentKind::Ror => {
                    let zk = self.zk.as_ref().unwrap();
                    let sb = self.sb.as_ref().unwrap();
                    let by = self.by.as_ref().unwrap();
                    let b2 = self.b2.as_ref().unwrap();
                    let (dy, ddy) = self.delta_y(i, &theta.gamma)?;
                    let r_i = self.a[i] - self.xg2(i, &theta.alpha2);
                    let dk = zk.ncols();
                    for r in 0..dk {
                        let ki = zk[[i, r]];
                        for j in 0..self.layout.d_x {
                            for s in 0..m2 {
                                jac[[r, j * m2 + s]] -= ki * dy * self.x[[i, j]] * b2[[i, s]];
                            }
                        }
                        for g in 0..self.layout.dim_gamma {
                            jac[[r, p2 + g]] += ki * r_i * ddy * by[[i, g]];
                        }
                    }
                    for r in 0..sb.ncols() {
                        for g in 0..self.layout.dim_gamma {
                            jac[[dk + r, p2 + g]] += sb[[i, r]] * ddy * by[[i, g]];
                        }
                    }
                }
                MomentKind::Dr => {
                    let zk = self.zk.as_ref().unwrap();
                    let z = self.z.as_ref().unwrap();
                    let sb = self.sb.as_ref().unwrap();
                    let by = self.by.as_ref().unwrap();
                    let b1 = self.b1.as_ref().unwrap();
                    let b2 = self.b2.as_ref().unwrap();
                    let (dy, ddy) = self.delta_y(i, &theta.gamma)?;
                    let d = self.delta_a_continuous(i, theta);
                    let dk = zk.ncols();
                    let dz = z.ncols();
                    for r in 0..dk {
                        let ki = zk[[i, r]];
                        for c in 0..p1 {
                            jac[[r, c]] -= ki * dy * b1[[i, c]];
                        }
                        for j in 0..self.layout.d_x {
                            for s in 0..m2 {
                                jac[[r, p1 + j * m2 + s]] -=
                                    ki * dy * self.x[[i, j]] * b2[[i, s]];
                            }
                        }
                        for g in 0..self.layout.dim_gamma {
                            jac[[r, p1 + p2 + g]] += ki * d * ddy * by[[i, g]];
                        }
                    }
                    for r in 0..dz {
                        let zi = z[[i, r]];
                        for c in 0..p1 {
                            jac[[dk + r, c]] -= zi * b1[[i, c]];
                        }
                        for j in 0..self.layout.d_x {
                            for s in 0..m2 {
                                jac[[dk + r, p1 + j * m2 + s]] -=
                                    zi * self.x[[i, j]] * b2[[i, s]];
                            }
                        }
                    }
                    for r in 0..sb.ncols() {
                        for g in 0..self.layout.dim_gamma {
                            jac[[dk + dz + r, p1 + p2 + g]] += sb[[i, r]] * ddy * by[[i, g]];
                        }
                    }
                }
                MomentKind::RpsBinary => {
                    let z = self.z.as_ref().unwrap();
                    let b1 = self.b1.as_ref().unwrap();
                    let arg = -self.alpha2_dot_x(i, &theta.alpha2) * self.a[i];
                    if arg > EXP_CAP {
                        return Err(Error::ExpOverflow { row: i });
                    }
                    let w = arg.exp();
                    let s = expit(self.g1(i, &theta.alpha1));
                    let e = self.a[i] - s;
                    for r in 0..z.ncols() {
                        let zi = z[[i, r]];
                        for c in 0..p1 {
                            jac[[r, c]] -= zi * w * s * (1.0 - s) * b1[[i, c]];
                        }
                        for j in 0..self.layout.d_x {
                            jac[[r, p1 + j]] -= zi * self.x[[i, j]] * self.a[i] * w * e;
                        }
                    }
                }
                MomentKind::RpsCount => {
                    let z = self.z.as_ref().unwrap();
                    let b1 = self.b1.as_ref().unwrap();
                    let arg = self.g1(i, &theta.alpha1) + self.alpha2_dot_x(i, &theta.alpha2);
                    if arg > EXP_CAP {
                        return Err(Error::ExpOverflow { row: i });
                    }
                    let mu = arg.exp();
                    for r in 0..z.ncols() {
                        let zi = z[[i, r]];
                        for c in 0..p1 {
                            jac[[r, c]] -= zi * mu * b1[[i, c]];
                        }
                        for j in 0..self.layout.d_x {
                            jac[[r, p1 + j]] -= zi * mu * self.x[[i, j]];
                        }
                    }
                }
                MomentKind::RorCount => {
                    let zk = self.zk.as_ref().unwrap();
                    let sb = self.sb.as_ref().unwrap();
                    let by = self.by.as_ref().unwrap();
                    let (dy, ddy) = self.delta_y(i, &theta.gamma)?;
                    let arg = -self.alpha2_dot_x(i, &theta.alpha2);
                    if arg > EXP_CAP {
                        return Err(Error::ExpOverflow { row: i });
                    }
                    let t = self.a[i] * arg.exp();
                    let dk = zk.ncols();
                    for r in 0..dk {
                        let ki = zk[[i, r]];
                        for j in 0..self.layout.d_x {
                            jac[[r, j]] -= ki * dy * self.x[[i, j]] * t;
                        }
                        for g in 0..self.layout.dim_gamma {
                            jac[[r, p2 + g]] += ki * t * ddy * by[[i, g]];
                        }
                    }
                    for r in 0..sb.ncols() {
                        for g in 0..self.layout.dim_gamma {
                            jac[[dk + r, p2 + g]] += sb[[i, r]] * ddy * by[[i, g]];
                        }
                    }
                }
                MomentKind::DrCount => {
                    let zk = self.zk.as_ref().unwrap();
                    let z = self.z.as_ref().unwrap();
                    let sb = self.sb.as_ref().unwrap();
                    let by = self.by.as_ref().unwrap();
                    let b1 = self.b1.as_ref().unwrap();
                    let (dy, ddy) = self.delta_y(i, &theta.gamma)?;
                    let e1 = -self.alpha2_dot_x(i, &theta.alpha2);
                    let e2 = self.g1(i, &theta.alpha1);
                    if e1 > EXP_CAP || e2 > EXP_CAP {
                        return Err(Error::ExpOverflow { row: i });
                    }
                    let t = self.a[i] * e1.exp();
                    let eg = e2.exp();
                    let d = t - eg;
                    let dk = zk.ncols();
                    let dz = z.ncols();
                    // d(delta)/d(alpha1) = -eg * b1; d(delta)/d(alpha2_j) = -x_j * t
                    for r in 0..dk {
                        let ki = zk[[i, r]];
                        for c in 0..p1 {
                            jac[[r, c]] -= ki * dy * eg * b1[[i, c]];
                        }
                        for j in 0..self.layout.d_x {
                            jac[[r, p1 + j]] -= ki * dy * self.x[[i, j]] * t;
                        }
                        for g in 0..self.layout.dim_gamma {
                            jac[[r, p1 + p2 + g]] += ki * d * ddy * by[[i, g]];
                        }
                    }
                    for r in 0..dz {
                        let zi = z[[i, r]];
                        for c in 0..p1 {
                            jac[[dk + r, c]] -= zi * eg * b1[[i, c]];
                        }
                        for j in 0..self.layout.d_x {
                            jac[[dk + r, p1 + j]] -= zi * self.x[[i, j]] * t;
                        }
                    }
                    for r in 0..sb.ncols() {
                        for g in 0..self.layout.dim_gamma {
                            jac[[dk + dz + r, p1 + p2 + g]] += sb[[i, r]] * ddy * by[[i, g]];
                        }
                    }
                }
            }
        }
        jac /= n as f64;
        Ok(jac)
    }

    /// Central-difference mean Jacobian; fallback/check for the analytic one.
    pub fn numeric_mean_jacobian(&self, theta: &ParamVector) -> Result<Array2<f64>> {
        let flat = theta.to_flat();
        let dim_t = flat.len();
        let mut jac = Array2::zeros((self.dim_u(), dim_t));
        for c in 0..dim_t {
            let h = 1e-6 * (1.0 + flat[c].abs());
            let mut up = flat.clone();
            up[c] += h;
            let mut dn = flat.clone();
            dn[c] -= h;
            let fu = self.mean_moments(&ParamVector::from_flat(self.layout, up.as_slice().unwrap())?)?;
            let fd = self.mean_moments(&ParamVector::from_flat(self.layout, dn.as_slice().unwrap())?)?;
            for r in 0..self.dim_u() {
                jac[[r, c]] = (fu[r] - fd[r]) / (2.0 * h);
            }
        }
        Ok(jac)
    }

    /// Solves the score block `P_n S(gamma) = 0` exactly. Linear solve under
    /// the identity link, damped Newton under a log link.
    pub fn solve_score(&self) -> Result<Array1<f64>> {
        let sb = self.sb.as_ref().ok_or_else(|| {
            Error::InvalidConfig("moment system has no score block".into())
        })?;
        let by = self.by.as_ref().unwrap();
        let dim = self.layout.dim_gamma;
        let n = self.n() as f64;
        match self.link.unwrap() {
            OutcomeLink::Identity => {
                // (1/n) Sb'(y - By gamma) = 0
                let a = sb.t().dot(by) / n;
                let b = sb.t().dot(&self.y) / n;
                linalg::solve(&a, &b)
            }
            OutcomeLink::Log => {
                let mean_y = self.y.mean().unwrap().max(1e-8);
                let mut gamma = Array1::zeros(dim);
                // Start from a constant predictor at the sample mean when the
                // basis carries an intercept-like first column.
                gamma[0] = mean_y.ln();
                for _ in 0..100 {
                    let mut f = Array1::zeros(dim);
                    let mut j = Array2::zeros((dim, dim));
                    for i in 0..self.n() {
                        let lin = by.row(i).dot(&gamma);
                        if lin > EXP_CAP {
                            return Err(Error::ExpOverflow { row: i });
                        }
                        let mu = lin.exp();
                        let resid = self.y[i] - mu;
                        for r in 0..dim {
                            f[r] += sb[[i, r]] * resid;
                            for c in 0..dim {
                                j[[r, c]] -= sb[[i, r]] * mu * by[[i, c]];
                            }
                        }
                    }
                    f /= n;
                    j /= n;
                    let step = linalg::solve(&j, &f)?;
                    let mut max_step = 0.0f64;
                    for r in 0..dim {
                        gamma[r] -= step[r];
                        max_step = max_step.max(step[r].abs());
                    }
                    if max_step < 1e-12 * (1.0 + gamma.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                        break;
                    }
                }
                Ok(gamma)
            }
        }
    }

    /// Cheap consistent-ish starting values: least squares for the exposure
    /// block, the score root for the outcome block.
    pub fn default_init(&self) -> Result<ParamVector> {
        let layout = self.layout;
        let mut theta = ParamVector::zeros(layout);
        if layout.dim_gamma > 0 {
            theta.gamma = self.solve_score()?;
        }
        if layout.p() == 0 {
            return Ok(theta);
        }
        match self.kind.exposure_kind() {
            ExposureKind::Continuous => {
                // Regress A on [b1 | X (x) b2].
                let n = self.n();
                let p = layout.p();
                let mut design = Array2::zeros((n, p));
                if let Some(b1) = &self.b1 {
                    for i in 0..n {
                        for c in 0..layout.p1 {
                            design[[i, c]] = b1[[i, c]];
                        }
                    }
                }
                let b2 = self.b2.as_ref().unwrap();
                for i in 0..n {
                    for j in 0..layout.d_x {
                        for s in 0..layout.m2 {
                            design[[i, layout.p1 + j * layout.m2 + s]] =
                                self.x[[i, j]] * b2[[i, s]];
                        }
                    }
                }
                let xtx = design.t().dot(&design);
                let xty = design.t().dot(&self.a);
                let sol = linalg::solve_spd(&xtx, &xty).or_else(|_| linalg::solve(&xtx, &xty))?;
                for c in 0..layout.p1 {
                    theta.alpha1[c] = sol[c];
                }
                for c in 0..layout.p2() {
                    theta.alpha2[c] = sol[layout.p1 + c];
                }
            }
            ExposureKind::Binary => {
                let mean_a = self.a.mean().unwrap().clamp(1e-6, 1.0 - 1e-6);
                if let Some(b1) = &self.b1 {
                    if let Some(c) = constant_column(b1) {
                        theta.alpha1[c] = (mean_a / (1.0 - mean_a)).ln();
                    }
                }
            }
            ExposureKind::Count => {
                let mean_a = self.a.mean().unwrap().max(1e-8);
                if let Some(b1) = &self.b1 {
                    if let Some(c) = constant_column(b1) {
                        theta.alpha1[c] = mean_a.ln();
                    }
                }
            }
        }
        Ok(theta)
    }
}

fn constant_column(m: &Array2<f64>) -> Option<usize> {
    (0..m.ncols()).find(|&c| m.column(c).iter().all(|&v| v == 1.0))
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Builds the `n x dim_u` moment matrix for `system` at `theta`.
pub fn build_moments(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<Array2<f64>> {
    system.bind(data)?.moment_matrix(theta)
}

/// Exposure residuals for the configured exposure kind: continuous
/// `A - g_a1 - X'g_a2`; count `A exp(-a2'X) - exp(g_a1)`.
pub fn exposure_residuals(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<Array1<f64>> {
    let bound = system.bind(data)?;
    theta.check(bound.layout)?;
    let n = bound.n();
    let mut out = Array1::zeros(n);
    match system.exposure_kind() {
        ExposureKind::Continuous => {
            for i in 0..n {
                out[i] = bound.delta_a_continuous(i, theta);
            }
        }
        ExposureKind::Count => {
            for i in 0..n {
                out[i] = bound.delta_a_count(i, theta)?;
            }
        }
        ExposureKind::Binary => {
            // Residual on the probability scale.
            for i in 0..n {
                out[i] = data.a[i] - expit(bound.g1(i, &theta.alpha1));
            }
        }
    }
    Ok(out)
}

/// Outcome residuals `Y - inverse_link(g_y(C; gamma))`.
pub fn outcome_residuals(
    system: &MomentSystem,
    data: &Dataset,
    theta: &ParamVector,
) -> Result<Array1<f64>> {
    let bound = system.bind(data)?;
    theta.check(bound.layout)?;
    let n = bound.n();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        out[i] = bound.delta_y(i, &theta.gamma)?.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn linear_map() -> DesignMap {
        DesignMap::new(vec![BasisSpec::polynomial(0, 1, true)])
    }

    fn constant_map() -> DesignMap {
        DesignMap::new(vec![BasisSpec::constant()])
    }

    fn random_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draw = |_: usize| -> f64 { rng.sample::<f64, _>(StandardNormal) };
        let y = Array1::from_shape_fn(n, &mut draw);
        let c = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let x = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let a = Array1::from_shape_fn(n, |i| {
            c[[i, 0]] + x[[i, 0]] + 2.0 * rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(y, a, c, x).unwrap()
    }

    fn rps_system() -> MomentSystem {
        MomentSystem::rps(
            linear_map(),
            constant_map(),
            Instruments::Map(DesignMap::orthonormalized(vec![BasisSpec::polynomial(
                0, 3, true,
            )])),
            Instruments::Zero(4),
            1,
        )
        .unwrap()
    }

    #[test]
    fn overidentification_bookkeeping() {
        let sys = rps_system();
        assert_eq!(sys.layout().p(), 3);
        assert_eq!(sys.q(), 1);
        assert_eq!(sys.dim_u(), 4);

        let ror = MomentSystem::ror(
            constant_map(),
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        assert_eq!(ror.q(), 1);
        assert_eq!(ror.dim_u(), 4);
        assert_eq!(ror.layout().total(), 3);

        let dr = MomentSystem::dr(
            linear_map(),
            constant_map(),
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Zero(2),
            Instruments::Map(linear_map()),
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        assert_eq!(dr.q(), 1);
        assert_eq!(dr.dim_u(), 6);
        assert_eq!(dr.layout().total(), 5);
    }

    #[test]
    fn discrete_kinds_bookkeeping() {
        let poly = Instruments::Map(DesignMap::orthonormalized(vec![BasisSpec::polynomial(
            0, 3, true,
        )]));
        let bin = MomentSystem::rps_binary(linear_map(), poly.clone(), poly.clone(), 1).unwrap();
        assert_eq!(bin.dim_u() - bin.layout().total(), bin.q());
        assert_eq!(bin.q(), 1);
        let cnt = MomentSystem::rps_count(linear_map(), poly.clone(), poly.clone(), 1).unwrap();
        assert_eq!(cnt.dim_u() - cnt.layout().total(), cnt.q());
        let ror_cnt = MomentSystem::ror_count(
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        assert_eq!(ror_cnt.dim_u() - ror_cnt.layout().total(), ror_cnt.q());
        assert_eq!(ror_cnt.q(), 1);
        let dr_cnt = MomentSystem::dr_count(
            linear_map(),
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Zero(2),
            Instruments::Map(linear_map()),
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        assert_eq!(dr_cnt.dim_u() - dr_cnt.layout().total(), dr_cnt.q());
        assert_eq!(dr_cnt.q(), 1);
    }

    #[test]
    fn score_dimension_must_match_gamma() {
        let err = MomentSystem::ror(
            constant_map(),
            OutcomeModel::identity(linear_map()),
            Some(constant_map()),
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn continuous_residual_trivial_cases() {
        let data = random_dataset(7, 50);
        let sys = rps_system();
        // alpha = 0 leaves the exposure untouched.
        let theta = ParamVector::zeros(sys.layout());
        let resid = exposure_residuals(&sys, &data, &theta).unwrap();
        for (r, a) in resid.iter().zip(data.a.iter()) {
            assert_abs_diff_eq!(r, a, epsilon = 1e-14);
        }
        // Exact model means zero residuals.
        let mut exact = data.clone();
        let theta = ParamVector {
            alpha1: array![0.3, -0.2],
            alpha2: array![0.8],
            gamma: Array1::zeros(0),
            psi: None,
        };
        for i in 0..exact.n() {
            exact.a[i] = 0.3 - 0.2 * exact.c[[i, 0]] + 0.8 * exact.x[[i, 0]];
        }
        let resid = exposure_residuals(&sys, &exact, &theta).unwrap();
        for r in resid.iter() {
            assert_abs_diff_eq!(r, &0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn outcome_residual_trivial_cases() {
        let data = random_dataset(9, 30);
        let sys = MomentSystem::ror(
            constant_map(),
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let theta = ParamVector {
            alpha1: Array1::zeros(0),
            alpha2: array![0.0],
            gamma: array![0.0, 0.0],
            psi: None,
        };
        let resid = outcome_residuals(&sys, &data, &theta).unwrap();
        for (r, y) in resid.iter().zip(data.y.iter()) {
            assert_abs_diff_eq!(r, y, epsilon = 1e-14);
        }

        // Log link at gamma = 0: residual is y - 1.
        let sys_log = MomentSystem::ror(
            constant_map(),
            OutcomeModel::log(linear_map()),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let resid = outcome_residuals(&sys_log, &data, &theta).unwrap();
        for (r, y) in resid.iter().zip(data.y.iter()) {
            assert_abs_diff_eq!(r, &(y - 1.0), epsilon = 1e-14);
        }
    }

    // With l = 0 and m the gradient basis, the moments are the ordinary
    // normal equations of the exposure regression: at the least-squares
    // solution every column mean vanishes.
    #[test]
    fn rps_with_gradient_instruments_reduces_to_normal_equations() {
        let data = random_dataset(11, 400);
        let m_map = DesignMap::new(vec![
            BasisSpec::polynomial(0, 1, true),
            BasisSpec::custom("c0", false), // placeholder replaced below
        ]);
        // Gradient instruments: [b1 columns, X-column products]. The X part
        // is not a function of C, so pass it as a precomputed matrix.
        let n = data.n();
        let mut grad = Array2::zeros((n, 3));
        for i in 0..n {
            grad[[i, 0]] = 1.0;
            grad[[i, 1]] = data.c[[i, 0]];
            grad[[i, 2]] = data.x[[i, 0]];
        }
        drop(m_map);
        let sys = MomentSystem::rps(
            linear_map(),
            constant_map(),
            Instruments::Zero(3),
            Instruments::Matrix(grad.clone()),
            1,
        )
        .unwrap();
        assert_eq!(sys.q(), 0);
        let bound = sys.bind(&data).unwrap();
        let theta = bound.default_init().unwrap(); // exactly the OLS solution
        let means = bound.mean_moments(&theta).unwrap();
        for v in means.iter() {
            assert_abs_diff_eq!(v, &0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn dr_first_block_vanishes_when_outcome_interpolates() {
        // Degenerate gamma making g_y interpolate Y exactly: Y generated
        // from the model itself.
        let mut data = random_dataset(13, 60);
        for i in 0..data.n() {
            data.y[i] = 1.0 + 2.0 * data.c[[i, 0]];
        }
        let sys = MomentSystem::dr(
            linear_map(),
            constant_map(),
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Zero(2),
            Instruments::Map(linear_map()),
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let theta = ParamVector {
            alpha1: array![0.1, 0.2],
            alpha2: array![0.4],
            gamma: array![1.0, 2.0],
            psi: None,
        };
        let u = build_moments(&sys, &data, &theta).unwrap();
        for i in 0..data.n() {
            assert_abs_diff_eq!(u[[i, 0]], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(u[[i, 1]], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn score_root_matches_ols() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 500;
        let c = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(n, |i| {
            0.7 + 1.3 * c[[i, 0]] + rng.sample::<f64, _>(StandardNormal)
        });
        let data = Dataset::new(
            y.clone(),
            Array1::zeros(n),
            c.clone(),
            Array2::zeros((n, 1)),
        )
        .unwrap();
        let sys = MomentSystem::ror(
            constant_map(),
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let bound = sys.bind(&data).unwrap();
        let gamma = bound.solve_score().unwrap();
        // OLS oracle via direct normal equations.
        let mut design = Array2::zeros((n, 2));
        for i in 0..n {
            design[[i, 0]] = 1.0;
            design[[i, 1]] = c[[i, 0]];
        }
        let xtx = design.t().dot(&design);
        let xty = design.t().dot(&y);
        let ols = linalg::solve_spd(&xtx, &xty).unwrap();
        assert_abs_diff_eq!(gamma[0], ols[0], epsilon = 1e-10);
        assert_abs_diff_eq!(gamma[1], ols[1], epsilon = 1e-10);

        // Constant-basis score: root is the sample mean.
        let sys_mean = MomentSystem::ror(
            constant_map(),
            OutcomeModel::identity(constant_map()),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let gamma = sys_mean.bind(&data).unwrap().solve_score().unwrap();
        assert_abs_diff_eq!(gamma[0], y.mean().unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn misspecified_square_score_has_unique_root() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 300;
        let c = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(n, |i| {
            0.5 * c[[i, 0]] + rng.sample::<f64, _>(StandardNormal)
        });
        let data = Dataset::new(y, Array1::zeros(n), c, Array2::zeros((n, 1))).unwrap();
        let square = DesignMap::new(vec![BasisSpec::custom("c0^2", true)]);
        let sys = MomentSystem::ror(
            constant_map(),
            OutcomeModel::identity(square),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let bound = sys.bind(&data).unwrap();
        let gamma = bound.solve_score().unwrap();
        // Root: score means vanish.
        let theta = ParamVector {
            alpha1: Array1::zeros(0),
            alpha2: array![0.0],
            gamma,
            psi: None,
        };
        let means = bound.mean_moments(&theta).unwrap();
        assert_abs_diff_eq!(means[2], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(means[3], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn analytic_jacobian_matches_central_differences() {
        let data = random_dataset(23, 120);
        let mut rng = ChaCha12Rng::seed_from_u64(99);

        let systems: Vec<MomentSystem> = vec![
            rps_system(),
            MomentSystem::ror(
                constant_map(),
                OutcomeModel::identity(linear_map()),
                None,
                Instruments::Map(linear_map()),
                1,
            )
            .unwrap(),
            MomentSystem::dr(
                linear_map(),
                constant_map(),
                OutcomeModel::identity(linear_map()),
                None,
                Instruments::Zero(2),
                Instruments::Map(linear_map()),
                Instruments::Map(linear_map()),
                1,
            )
            .unwrap(),
        ];
        for sys in systems {
            let bound = sys.bind(&data).unwrap();
            let flat: Vec<f64> = (0..sys.layout().total())
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect();
            let theta = ParamVector::from_flat(sys.layout(), &flat).unwrap();
            let analytic = bound.mean_jacobian(&theta).unwrap();
            let numeric = bound.numeric_mean_jacobian(&theta).unwrap();
            for (a, b) in analytic.iter().zip(numeric.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn discrete_jacobians_match_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let n = 150;
        let c = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let x = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
        let a_bin = Array1::from_shape_fn(n, |_| f64::from(rng.gen_bool(0.4)));
        let a_cnt = Array1::from_shape_fn(n, |_| rng.gen_range(0..7) as f64);
        let bin = Dataset::new(y.clone(), a_bin, c.clone(), x.clone()).unwrap();
        let cnt = Dataset::new(y, a_cnt, c, x).unwrap();

        let poly = Instruments::Map(DesignMap::orthonormalized(vec![BasisSpec::polynomial(
            0, 3, true,
        )]));
        let theta_bin = ParamVector {
            alpha1: array![-0.2, 0.3],
            alpha2: array![0.25],
            gamma: Array1::zeros(0),
            psi: None,
        };

        let sys = MomentSystem::rps_binary(linear_map(), poly.clone(), poly.clone(), 1).unwrap();
        let bound = sys.bind(&bin).unwrap();
        let analytic = bound.mean_jacobian(&theta_bin).unwrap();
        let numeric = bound.numeric_mean_jacobian(&theta_bin).unwrap();
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }

        let sys = MomentSystem::rps_count(linear_map(), poly.clone(), poly.clone(), 1).unwrap();
        let bound = sys.bind(&cnt).unwrap();
        let theta_cnt = ParamVector {
            alpha1: array![0.1, 0.2],
            alpha2: array![0.15],
            gamma: Array1::zeros(0),
            psi: None,
        };
        let analytic = bound.mean_jacobian(&theta_cnt).unwrap();
        let numeric = bound.numeric_mean_jacobian(&theta_cnt).unwrap();
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }

        let sys = MomentSystem::dr_count(
            linear_map(),
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Zero(2),
            Instruments::Map(linear_map()),
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let bound = sys.bind(&cnt).unwrap();
        let theta = ParamVector {
            alpha1: array![0.1, 0.2],
            alpha2: array![0.15],
            gamma: array![0.05, 0.3],
            psi: None,
        };
        let analytic = bound.mean_jacobian(&theta).unwrap();
        let numeric = bound.numeric_mean_jacobian(&theta).unwrap();
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }

        let sys = MomentSystem::ror_count(
            OutcomeModel::identity(linear_map()),
            None,
            Instruments::Map(linear_map()),
            1,
        )
        .unwrap();
        let bound = sys.bind(&cnt).unwrap();
        let theta = ParamVector {
            alpha1: Array1::zeros(0),
            alpha2: array![0.15],
            gamma: array![0.05, 0.3],
            psi: None,
        };
        let analytic = bound.mean_jacobian(&theta).unwrap();
        let numeric = bound.numeric_mean_jacobian(&theta).unwrap();
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    // For the continuous propensity-score kind with linear bases the moments
    // are affine in theta: values at any point must equal the interpolation
    // through dim(theta) + 1 affinely independent points.
    #[test]
    fn rps_moments_affine_in_theta() {
        let data = random_dataset(41, 80);
        let sys = rps_system();
        let bound = sys.bind(&data).unwrap();
        let dim = sys.layout().total();
        let at = |flat: &[f64]| {
            bound
                .mean_moments(&ParamVector::from_flat(sys.layout(), flat).unwrap())
                .unwrap()
        };
        let base = at(&vec![0.0; dim]);
        // Interpolate: U(t) = U(0) + sum_j t_j (U(e_j) - U(0)).
        let probe = vec![0.37, -1.2, 0.05];
        let mut interp = base.clone();
        for j in 0..dim {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let uj = at(&e);
            interp = interp + (&uj - &base) * probe[j];
        }
        let direct = at(&probe);
        for (a, b) in direct.iter().zip(interp.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn exp_overflow_carries_row_index() {
        let data = Dataset::new(
            array![1.0, 2.0, 0.5, -0.3, 1.2, 0.0],
            array![1.0, 3.0, 0.0, 2.0, 1.0, 4.0],
            array![[0.5], [0.6], [-1.1], [0.2], [1.4], [-0.7]],
            array![[1.0], [4000.0], [0.5], [-0.2], [0.9], [1.3]],
        )
        .unwrap();
        let poly = Instruments::Map(DesignMap::new(vec![BasisSpec::polynomial(0, 3, true)]));
        let sys = MomentSystem::rps_count(linear_map(), poly.clone(), poly, 1).unwrap();
        let theta = ParamVector {
            alpha1: array![0.0, 0.0],
            alpha2: array![1.0],
            gamma: Array1::zeros(0),
            psi: None,
        };
        let err = build_moments(&sys, &data, &theta).unwrap_err();
        assert_eq!(err, Error::ExpOverflow { row: 1 });
    }

    #[test]
    fn duplicate_instrument_columns_fail_rank_check() {
        let data = random_dataset(51, 40);
        let dup = DesignMap::new(vec![
            BasisSpec::polynomial(0, 1, true),
            BasisSpec::polynomial(0, 1, true),
        ]);
        let sys = MomentSystem::rps(
            linear_map(),
            constant_map(),
            Instruments::Map(dup),
            Instruments::Zero(4),
            1,
        )
        .unwrap();
        assert!(matches!(
            sys.bind(&data).unwrap_err(),
            Error::RankDeficient { .. }
        ));
    }
}
