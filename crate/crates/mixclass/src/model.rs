//! Domain types, component densities, gating functions, and the observed-data
//! mixture log-likelihood shared by the estimators and the efficiency engine.
//!
//! The model: a response `Y` follows a parametric regression on a categorical
//! covariate `V` with `K` categories, but only a misclassified copy `V*` is
//! observed. Conditional on `V* = k`, the density of `Y` is a `K`-component
//! mixture whose weights are the reclassification probabilities
//! `q_kj = P(V = j | V* = k)`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Tolerance for probability-row sums.
const ROW_SUM_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Response families
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Normal,
    StudentT,
    Poisson,
    ZeroInflatedPoisson,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
}

/// A response family paired with its link. The pairing is fixed: identity for
/// the continuous location families, log for the count and gamma families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FamilyLinkRepr", into = "FamilyLinkRepr")]
pub struct ResponseFamily {
    kind: FamilyKind,
    link: Link,
}

#[derive(Serialize, Deserialize)]
struct FamilyLinkRepr {
    kind: FamilyKind,
    link: Link,
}

impl TryFrom<FamilyLinkRepr> for ResponseFamily {
    type Error = Error;
    fn try_from(r: FamilyLinkRepr) -> Result<Self> {
        ResponseFamily::new(r.kind, r.link)
    }
}

impl From<ResponseFamily> for FamilyLinkRepr {
    fn from(f: ResponseFamily) -> Self {
        FamilyLinkRepr { kind: f.kind, link: f.link }
    }
}

impl ResponseFamily {
    pub fn new(kind: FamilyKind, link: Link) -> Result<Self> {
        let expected = Self::canonical_link(kind);
        if link != expected {
            return Err(Error::Config(format!(
                "family {kind:?} requires {expected:?} link, got {link:?}"
            )));
        }
        Ok(ResponseFamily { kind, link })
    }

    /// The family with its fixed link.
    pub fn of(kind: FamilyKind) -> Self {
        ResponseFamily { kind, link: Self::canonical_link(kind) }
    }

    fn canonical_link(kind: FamilyKind) -> Link {
        match kind {
            FamilyKind::Normal | FamilyKind::StudentT => Link::Identity,
            FamilyKind::Poisson | FamilyKind::ZeroInflatedPoisson | FamilyKind::Gamma => Link::Log,
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, FamilyKind::Poisson | FamilyKind::ZeroInflatedPoisson)
    }
}

// ---------------------------------------------------------------------------
// Probability matrices
// ---------------------------------------------------------------------------

fn validate_prob_rows(rows: &[Vec<f64>], what: &str) -> Result<()> {
    let k = rows.len();
    if k < 2 {
        return Err(Error::Config(format!("{what} needs K >= 2 rows, got {k}")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Config(format!(
                "{what} row {i} has {} entries, expected {k}",
                row.len()
            )));
        }
        let mut sum = 0.0;
        for &p in row {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} row {i} entry {p} outside [0,1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Config(format!("{what} row {i} sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

/// Classification matrix `P`: entry `(k, j)` is `p_kj = P(V* = j | V = k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ClassificationMatrix {
    rows: Vec<Vec<f64>>,
}

/// Reclassification matrix `Q`: entry `(k, j)` is `q_kj = P(V = j | V* = k)`.
/// These are the mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ReclassificationMatrix {
    rows: Vec<Vec<f64>>,
}

macro_rules! prob_matrix_impl {
    ($ty:ident, $name:literal) => {
        impl $ty {
            pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
                validate_prob_rows(&rows, $name)?;
                Ok(Self { rows })
            }

            /// Identity matrix of size `k` (no misclassification).
            pub fn identity(k: usize) -> Self {
                let rows = (0..k)
                    .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                Self { rows }
            }

            pub fn n_categories(&self) -> usize {
                self.rows.len()
            }

            pub fn entry(&self, k: usize, j: usize) -> f64 {
                self.rows[k][j]
            }

            pub fn row(&self, k: usize) -> &[f64] {
                &self.rows[k]
            }

            pub fn rows(&self) -> &[Vec<f64>] {
                &self.rows
            }
        }

        impl TryFrom<Vec<Vec<f64>>> for $ty {
            type Error = Error;
            fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
                Self::new(rows)
            }
        }

        impl From<$ty> for Vec<Vec<f64>> {
            fn from(m: $ty) -> Self {
                m.rows
            }
        }
    };
}

prob_matrix_impl!(ClassificationMatrix, "classification matrix");
prob_matrix_impl!(ReclassificationMatrix, "reclassification matrix");

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

/// Multinomial-logit weights for one observed category: category `j < K-1` has
/// linear predictor `nu_j + w' gamma_j`; the base category `K-1` is pinned at
/// zero, which breaks the location invariance of the gating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    /// `nu_j` for `j = 0..K-2`.
    pub intercepts: Vec<f64>,
    /// `gamma_j` for `j = 0..K-2`; empty inner vectors mean no gating covariates.
    pub coefs: Vec<Vec<f64>>,
}

impl LogitRow {
    pub fn new(intercepts: Vec<f64>, coefs: Vec<Vec<f64>>) -> Result<Self> {
        if coefs.len() != intercepts.len() {
            return Err(Error::Config(format!(
                "logit row: {} intercepts but {} coefficient vectors",
                intercepts.len(),
                coefs.len()
            )));
        }
        let m = coefs.first().map_or(0, Vec::len);
        if coefs.iter().any(|c| c.len() != m) {
            return Err(Error::Config("logit row: ragged coefficient vectors".into()));
        }
        Ok(LogitRow { intercepts, coefs })
    }

    /// Number of non-base categories (K - 1).
    pub fn n_free(&self) -> usize {
        self.intercepts.len()
    }

    pub fn w_dim(&self) -> usize {
        self.coefs.first().map_or(0, Vec::len)
    }

    /// Softmax over the K categories at gating covariates `w`.
    pub fn probabilities(&self, w: &[f64]) -> Result<Vec<f64>> {
        let k = self.n_free() + 1;
        let m = self.w_dim();
        if m > 0 && w.len() != m {
            return Err(Error::Config(format!(
                "gating covariate row has {} entries, expected {m}",
                w.len()
            )));
        }
        let mut eta = Vec::with_capacity(k);
        for j in 0..k - 1 {
            let mut e = self.intercepts[j];
            for (g, &wv) in self.coefs[j].iter().zip(w) {
                e += g * wv;
            }
            eta.push(e);
        }
        eta.push(0.0); // base category
        let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for p in &mut out {
            *p /= sum;
        }
        Ok(out)
    }
}

/// How the mixture weights (reclassification probabilities) are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GatingSpec {
    /// A fixed row per observed category.
    ConstantMatrix(ReclassificationMatrix),
    /// A multinomial-logit model per observed category, weights depending on
    /// the gating covariates `w`.
    LogitModel(Vec<LogitRow>),
}

impl GatingSpec {
    pub fn n_categories(&self) -> usize {
        match self {
            GatingSpec::ConstantMatrix(q) => q.n_categories(),
            GatingSpec::LogitModel(rows) => rows.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GatingSpec::ConstantMatrix(_) => Ok(()),
            GatingSpec::LogitModel(rows) => {
                let k = rows.len();
                if k < 2 {
                    return Err(Error::Config("logit gating needs K >= 2 rows".into()));
                }
                for row in rows {
                    if row.n_free() + 1 != k {
                        return Err(Error::Config(format!(
                            "logit gating row covers {} categories, expected {k}",
                            row.n_free() + 1
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// The reclassification row for observed category `v_star`, i.e. the mixture
/// weights `(q_{v*,0}, ..., q_{v*,K-1})`.
pub fn gating_probabilities(
    gating: &GatingSpec,
    v_star: usize,
    w_row: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let k = gating.n_categories();
    if v_star >= k {
        return Err(Error::Config(format!("observed category {v_star} out of range 0..{k}")));
    }
    match gating {
        GatingSpec::ConstantMatrix(q) => Ok(q.row(v_star).to_vec()),
        GatingSpec::LogitModel(rows) => {
            let row = &rows[v_star];
            let w = match w_row {
                Some(w) => w,
                None if row.w_dim() == 0 => &[],
                None => {
                    return Err(Error::Config(
                        "logit gating with covariates needs a w row".into(),
                    ))
                }
            };
            row.probabilities(w)
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Family-specific nuisance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nuisance {
    Normal { sigma: f64 },
    StudentT { sigma: f64, df: f64 },
    Poisson,
    Zip { zero_weight: f64 },
    Gamma { shape: f64 },
}

impl Nuisance {
    fn validate(&self) -> Result<()> {
        match *self {
            Nuisance::Normal { sigma } if sigma <= 0.0 => {
                Err(Error::Config(format!("sigma must be positive, got {sigma}")))
            }
            Nuisance::StudentT { sigma, df } if sigma <= 0.0 || df <= 0.0 => Err(Error::Config(
                format!("student-t needs sigma > 0, df > 0, got sigma={sigma}, df={df}"),
            )),
            Nuisance::Zip { zero_weight } if !(0.0..1.0).contains(&zero_weight) => Err(
                Error::Config(format!("zero-inflation weight must be in [0,1), got {zero_weight}")),
            ),
            Nuisance::Gamma { shape } if shape <= 0.0 => {
                Err(Error::Config(format!("gamma shape must be positive, got {shape}")))
            }
            _ => Ok(()),
        }
    }

    fn matches(&self, kind: FamilyKind) -> bool {
        matches!(
            (self, kind),
            (Nuisance::Normal { .. }, FamilyKind::Normal)
                | (Nuisance::StudentT { .. }, FamilyKind::StudentT)
                | (Nuisance::Poisson, FamilyKind::Poisson)
                | (Nuisance::Zip { .. }, FamilyKind::ZeroInflatedPoisson)
                | (Nuisance::Gamma { .. }, FamilyKind::Gamma)
        )
    }
}

/// Full parameter vector: regression coefficients, nuisance, observed-category
/// probabilities, and the gating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Intercept on the link scale.
    pub alpha0: f64,
    /// Category effect per unit of `V` on the link scale.
    pub alpha1: f64,
    /// Coefficients for the accurate covariates `x`.
    pub beta: Vec<f64>,
    pub nuisance: Nuisance,
    /// Marginal probabilities of the observed category `V*`.
    pub pi_star: Vec<f64>,
    pub gating: GatingSpec,
}

impl Theta {
    pub fn n_categories(&self) -> usize {
        self.pi_star.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha0.is_finite() || !self.alpha1.is_finite() {
            return Err(Error::Config("non-finite regression coefficient".into()));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("non-finite beta coefficient".into()));
        }
        self.nuisance.validate()?;
        let mut sum = 0.0;
        for &p in &self.pi_star {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("pi_star entry {p} outside [0,1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Config(format!("pi_star sums to {sum}, expected 1")));
        }
        self.gating.validate()?;
        if self.gating.n_categories() != self.pi_star.len() {
            return Err(Error::Config(format!(
                "gating covers {} categories but pi_star has {}",
                self.gating.n_categories(),
                self.pi_star.len()
            )));
        }
        Ok(())
    }

    /// Validate plus the sign-restriction identifiability constraint.
    pub fn validate_signed(&self, positive_slope: bool) -> Result<()> {
        self.validate()?;
        if positive_slope && self.alpha1 <= 0.0 {
            return Err(Error::Config(format!(
                "sign restriction requires alpha1 > 0, got {}",
                self.alpha1
            )));
        }
        Ok(())
    }
}

/// Model shape: response family, number of categories, covariate dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ResponseFamily,
    pub n_categories: usize,
    pub x_dim: usize,
    pub w_dim: usize,
}

impl ModelSpec {
    pub fn new(family: ResponseFamily, n_categories: usize) -> Self {
        ModelSpec { family, n_categories, x_dim: 0, w_dim: 0 }
    }

    pub fn with_x_dim(mut self, x_dim: usize) -> Self {
        self.x_dim = x_dim;
        self
    }

    pub fn with_w_dim(mut self, w_dim: usize) -> Self {
        self.w_dim = w_dim;
        self
    }

    pub fn validate_theta(&self, theta: &Theta) -> Result<()> {
        theta.validate()?;
        if !theta.nuisance.matches(self.family.kind()) {
            return Err(Error::Config(format!(
                "nuisance {:?} does not match family {:?}",
                theta.nuisance,
                self.family.kind()
            )));
        }
        if theta.pi_star.len() != self.n_categories {
            return Err(Error::Config(format!(
                "theta has {} categories, spec has {}",
                theta.pi_star.len(),
                self.n_categories
            )));
        }
        if theta.beta.len() != self.x_dim {
            return Err(Error::Config(format!(
                "theta has {} beta coefficients, spec has x_dim {}",
                theta.beta.len(),
                self.x_dim
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Observed sample: responses, observed categories, optional accurate and
/// gating covariates. All row counts agree.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub v_star: Vec<usize>,
    pub x: Option<Vec<Vec<f64>>>,
    pub w: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        v_star: Vec<usize>,
        x: Option<Vec<Vec<f64>>>,
        w: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Config("dataset needs at least one row".into()));
        }
        if v_star.len() != n {
            return Err(Error::Config(format!(
                "y has {n} rows but v_star has {}",
                v_star.len()
            )));
        }
        for (name, mat) in [("x", &x), ("w", &w)] {
            if let Some(m) = mat {
                if m.len() != n {
                    return Err(Error::Config(format!("y has {n} rows but {name} has {}", m.len())));
                }
                let p = m.first().map_or(0, Vec::len);
                if m.iter().any(|r| r.len() != p) {
                    return Err(Error::Config(format!("{name} has ragged rows")));
                }
            }
        }
        Ok(Dataset { y, v_star, x, w })
    }

    /// Zero-row dataset; the sampler reduces to the prior on it.
    pub fn empty() -> Self {
        Dataset { y: Vec::new(), v_star: Vec::new(), x: None, w: None }
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        self.x.as_ref().map_or(&[], |m| &m[i])
    }

    pub fn w_row(&self, i: usize) -> Option<&[f64]> {
        self.w.as_ref().map(|m| m[i].as_slice())
    }

    pub fn validate_for(&self, spec: &ModelSpec) -> Result<()> {
        if let Some(&bad) = self.v_star.iter().find(|&&v| v >= spec.n_categories) {
            return Err(Error::Config(format!(
                "v_star value {bad} out of range 0..{}",
                spec.n_categories
            )));
        }
        let x_dim = self.x.as_ref().map_or(0, |m| m.first().map_or(0, Vec::len));
        if x_dim != spec.x_dim {
            return Err(Error::Config(format!(
                "data has x_dim {x_dim}, spec has {}",
                spec.x_dim
            )));
        }
        let w_dim = self.w.as_ref().map_or(0, |m| m.first().map_or(0, Vec::len));
        if w_dim != spec.w_dim {
            return Err(Error::Config(format!(
                "data has w_dim {w_dim}, spec has {}",
                spec.w_dim
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Component log-densities
// ---------------------------------------------------------------------------

pub(crate) fn normal_logpdf(y: f64, mean: f64, sigma: f64) -> f64 {
    let z = (y - mean) / sigma;
    -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z
}

pub(crate) fn student_t_logpdf(y: f64, loc: f64, scale: f64, df: f64) -> f64 {
    let z = (y - loc) / scale;
    ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln()
        - scale.ln()
        - 0.5 * (df + 1.0) * (z * z / df).ln_1p()
}

pub(crate) fn poisson_logpmf(y: f64, log_lambda: f64) -> f64 {
    // y is validated as a non-negative integer upstream
    y * log_lambda - log_lambda.exp() - ln_gamma(y + 1.0)
}

/// Zero-inflated Poisson on the mean-identity parameterization: the linear
/// predictor gives the ZIP mean `mu' = exp(eta)`, so the Poisson component has
/// mean `exp(eta) / (1 - w)`.
pub(crate) fn zip_logpmf(y: f64, log_mean: f64, zero_weight: f64) -> f64 {
    let lambda = log_mean.exp() / (1.0 - zero_weight);
    if y == 0.0 {
        // ln(w + (1-w) e^{-lambda})
        let a = zero_weight.ln();
        let b = (1.0 - zero_weight).ln() - lambda;
        if zero_weight == 0.0 {
            b
        } else {
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        }
    } else {
        (1.0 - zero_weight).ln() + y * lambda.ln() - lambda - ln_gamma(y + 1.0)
    }
}

/// Gamma with log-link mean parameterization: mean `exp(eta)`, shape `k`,
/// so rate = shape / mean.
pub(crate) fn gamma_logpdf(y: f64, log_mean: f64, shape: f64) -> f64 {
    let log_rate = shape.ln() - log_mean;
    shape * log_rate + (shape - 1.0) * y.ln() - (log_rate.exp()) * y - ln_gamma(shape)
}

fn check_response(family: ResponseFamily, y: f64) -> Result<()> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("non-finite response {y}")));
    }
    match family.kind() {
        FamilyKind::Poisson | FamilyKind::ZeroInflatedPoisson => {
            if y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Domain(format!(
                    "count families need non-negative integer responses, got {y}"
                )));
            }
        }
        FamilyKind::Gamma => {
            if y <= 0.0 {
                return Err(Error::Domain(format!("gamma responses must be positive, got {y}")));
            }
        }
        FamilyKind::Normal | FamilyKind::StudentT => {}
    }
    Ok(())
}

/// Linear predictor `alpha0 + alpha1 * v + x' beta`.
pub fn linear_predictor(theta: &Theta, v: usize, x_row: &[f64]) -> f64 {
    let mut eta = theta.alpha0 + theta.alpha1 * v as f64;
    for (b, &xv) in theta.beta.iter().zip(x_row) {
        eta += b * xv;
    }
    eta
}

/// Log density (or log pmf) of `Y = y` given the latent category `V = v` and
/// accurate covariates `x_row`.
pub fn component_logpdf(
    family: ResponseFamily,
    theta: &Theta,
    v: usize,
    x_row: &[f64],
    y: f64,
) -> Result<f64> {
    check_response(family, y)?;
    if v >= theta.n_categories() {
        return Err(Error::Config(format!(
            "category {v} out of range 0..{}",
            theta.n_categories()
        )));
    }
    let eta = linear_predictor(theta, v, x_row);
    let lp = match (family.kind(), &theta.nuisance) {
        (FamilyKind::Normal, Nuisance::Normal { sigma }) => normal_logpdf(y, eta, *sigma),
        (FamilyKind::StudentT, Nuisance::StudentT { sigma, df }) => {
            student_t_logpdf(y, eta, *sigma, *df)
        }
        (FamilyKind::Poisson, Nuisance::Poisson) => poisson_logpmf(y, eta),
        (FamilyKind::ZeroInflatedPoisson, Nuisance::Zip { zero_weight }) => {
            zip_logpmf(y, eta, *zero_weight)
        }
        (FamilyKind::Gamma, Nuisance::Gamma { shape }) => gamma_logpdf(y, eta, *shape),
        (kind, nuisance) => {
            return Err(Error::Config(format!(
                "nuisance {nuisance:?} does not match family {kind:?}"
            )))
        }
    };
    Ok(lp)
}

// ---------------------------------------------------------------------------
// Mixture log-likelihood
// ---------------------------------------------------------------------------

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Observed-data mixture log-likelihood:
/// `sum_i [ log pi*_{v*_i} + log sum_j q_{v*_i j}(w_i) f_Y(y_i | V=j, x_i) ]`,
/// with the inner sum stabilized by log-sum-exp.
pub fn mixture_loglik(spec: &ModelSpec, theta: &Theta, data: &Dataset) -> Result<f64> {
    spec.validate_theta(theta)?;
    data.validate_for(spec)?;
    let k = spec.n_categories;
    let mut total = 0.0;
    let mut terms = vec![0.0; k];
    for i in 0..data.n_rows() {
        let q = gating_probabilities(&theta.gating, data.v_star[i], data.w_row(i))?;
        for j in 0..k {
            terms[j] = if q[j] > 0.0 {
                q[j].ln() + component_logpdf(spec.family, theta, j, data.x_row(i), data.y[i])?
            } else {
                f64::NEG_INFINITY
            };
        }
        let li = theta.pi_star[data.v_star[i]].ln() + log_sum_exp(&terms);
        if !li.is_finite() {
            return Err(Error::Numeric {
                row: i,
                msg: format!("non-finite log-likelihood contribution {li}"),
            });
        }
        total += li;
    }
    Ok(total)
}

/// Per-row table of component log densities `log f_Y(y_i | V = j, x_i)`,
/// the shared inner loop of the E-step and the latent-category sweep.
pub fn log_density_table(spec: &ModelSpec, theta: &Theta, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let k = spec.n_categories;
    let mut out = Vec::with_capacity(data.n_rows());
    for i in 0..data.n_rows() {
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            row.push(component_logpdf(spec.family, theta, j, data.x_row(i), data.y[i])?);
        }
        out.push(row);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reclassification derivation
// ---------------------------------------------------------------------------

/// Derive the observed-category probabilities and the reclassification matrix
/// from the classification matrix and the true category probabilities:
/// `pi*_k = sum_j p_jk pi_j` and `q_kj = p_jk pi_j / pi*_k`.
pub fn derive_reclassification(
    p: &ClassificationMatrix,
    pi: &[f64],
) -> Result<(Vec<f64>, ReclassificationMatrix)> {
    let k = p.n_categories();
    if pi.len() != k {
        return Err(Error::Config(format!("pi has {} entries, P is {k}x{k}", pi.len())));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL || pi.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Config(format!("pi must be a probability vector, sums to {sum}")));
    }
    let mut pi_star = vec![0.0; k];
    for (j, &pj) in pi.iter().enumerate() {
        for (kk, ps) in pi_star.iter_mut().enumerate() {
            *ps += p.entry(j, kk) * pj;
        }
    }
    let mut q_rows = vec![vec![0.0; k]; k];
    for (kk, row) in q_rows.iter_mut().enumerate() {
        if pi_star[kk] <= 0.0 {
            return Err(Error::DegenerateCategory(kk));
        }
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = p.entry(j, kk) * pi[j] / pi_star[kk];
        }
        // renormalize away the last few ulps so the constructor's row-sum check holds
        let s: f64 = row.iter().sum();
        for cell in row.iter_mut() {
            *cell /= s;
        }
    }
    Ok((pi_star, ReclassificationMatrix::new(q_rows)?))
}

/// Inverse direction: recover `(pi, P)` from `(Q, pi*)` by the same Bayes
/// inversion with the roles of `V` and `V*` swapped.
pub fn derive_classification(
    q: &ReclassificationMatrix,
    pi_star: &[f64],
) -> Result<(Vec<f64>, ClassificationMatrix)> {
    let k = q.n_categories();
    if pi_star.len() != k {
        return Err(Error::Config(format!("pi_star has {} entries, Q is {k}x{k}", pi_star.len())));
    }
    let mut pi = vec![0.0; k];
    for (kk, &ps) in pi_star.iter().enumerate() {
        for (j, pj) in pi.iter_mut().enumerate() {
            *pj += q.entry(kk, j) * ps;
        }
    }
    let mut p_rows = vec![vec![0.0; k]; k];
    for (j, row) in p_rows.iter_mut().enumerate() {
        if pi[j] <= 0.0 {
            return Err(Error::DegenerateCategory(j));
        }
        for (kk, cell) in row.iter_mut().enumerate() {
            *cell = q.entry(kk, j) * pi_star[kk] / pi[j];
        }
        let s: f64 = row.iter().sum();
        for cell in row.iter_mut() {
            *cell /= s;
        }
    }
    Ok((pi, ClassificationMatrix::new(p_rows)?))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_theta(alpha0: f64, alpha1: f64, sigma: f64, k: usize) -> Theta {
        Theta {
            alpha0,
            alpha1,
            beta: vec![],
            nuisance: Nuisance::Normal { sigma },
            pi_star: vec![1.0 / k as f64; k],
            gating: GatingSpec::ConstantMatrix(ReclassificationMatrix::identity(k)),
        }
    }

    pub(crate) fn paper_p() -> ClassificationMatrix {
        ClassificationMatrix::new(vec![
            vec![0.80, 0.15, 0.05],
            vec![0.10, 0.70, 0.20],
            vec![0.05, 0.15, 0.80],
        ])
        .unwrap()
    }

    #[test]
    fn family_link_pairing_is_fixed() {
        assert!(ResponseFamily::new(FamilyKind::Normal, Link::Identity).is_ok());
        assert!(ResponseFamily::new(FamilyKind::Normal, Link::Log).is_err());
        assert!(ResponseFamily::new(FamilyKind::Poisson, Link::Log).is_ok());
        assert!(ResponseFamily::new(FamilyKind::Poisson, Link::Identity).is_err());
        assert!(ResponseFamily::new(FamilyKind::Gamma, Link::Identity).is_err());
    }

    #[test]
    fn standard_normal_at_mode() {
        let theta = normal_theta(0.0, 0.0, 1.0, 2);
        let lp =
            component_logpdf(ResponseFamily::of(FamilyKind::Normal), &theta, 0, &[], 0.0).unwrap();
        // log(1/sqrt(2 pi))
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn normal_at_conditional_mean_with_scale_two() {
        let theta = normal_theta(12.0, 10.0, 2.0, 3);
        let lp =
            component_logpdf(ResponseFamily::of(FamilyKind::Normal), &theta, 2, &[], 32.0).unwrap();
        // y equals the conditional mean 12 + 10*2, so this is log(1/(2 sqrt(2 pi)))
        let expected = -(2.0f64).ln() - 0.5 * LN_2PI;
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn poisson_logpmf_matches_high_precision_value() {
        let theta = Theta {
            alpha0: 1.2,
            alpha1: 1.0,
            beta: vec![],
            nuisance: Nuisance::Poisson,
            pi_star: vec![0.5, 0.5],
            gating: GatingSpec::ConstantMatrix(ReclassificationMatrix::identity(2)),
        };
        let lp = component_logpdf(ResponseFamily::of(FamilyKind::Poisson), &theta, 1, &[], 9.0)
            .unwrap();
        // Poisson(exp(2.2)) at 9; mean exp(2.2) = 9.0250135
        assert!((2.2f64.exp() - 9.025_013_499_434_122).abs() < 1e-12);
        let expected = 9.0 * 2.2 - 2.2f64.exp() - ln_gamma(10.0);
        assert!((lp - expected).abs() < 1e-12);
        assert!((lp - (-2.026_840_979_515_59)).abs() < 1e-10);
    }

    #[test]
    fn count_domain_errors() {
        let theta = Theta {
            alpha0: 0.0,
            alpha1: 0.0,
            beta: vec![],
            nuisance: Nuisance::Poisson,
            pi_star: vec![0.5, 0.5],
            gating: GatingSpec::ConstantMatrix(ReclassificationMatrix::identity(2)),
        };
        let fam = ResponseFamily::of(FamilyKind::Poisson);
        assert!(matches!(
            component_logpdf(fam, &theta, 0, &[], -1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            component_logpdf(fam, &theta, 0, &[], 2.5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            component_logpdf(fam, &theta, 0, &[], f64::NAN),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gating_constant_matrix_row_lookup() {
        // Q as displayed in the ordinal scenario
        let q = ReclassificationMatrix::new(vec![
            vec![0.74, 0.14, 0.12],
            vec![0.10, 0.67, 0.24],
            vec![0.02, 0.13, 0.85],
        ])
        .unwrap();
        let gating = GatingSpec::ConstantMatrix(q);
        let row = gating_probabilities(&gating, 0, None).unwrap();
        assert_eq!(row, vec![0.74, 0.14, 0.12]);
    }

    #[test]
    fn gating_logit_symmetric_and_prior_mean_cases() {
        let sym = GatingSpec::LogitModel(vec![
            LogitRow::new(vec![0.0], vec![vec![]]).unwrap(),
            LogitRow::new(vec![0.0], vec![vec![]]).unwrap(),
        ]);
        let row = gating_probabilities(&sym, 0, None).unwrap();
        assert!((row[0] - 0.5).abs() < 1e-15);
        assert!((row[1] - 0.5).abs() < 1e-15);

        // logit^{-1}(-2.1972) = 0.1 up to the rounding of ln(9)
        let skew = GatingSpec::LogitModel(vec![
            LogitRow::new(vec![-2.1972], vec![vec![]]).unwrap(),
            LogitRow::new(vec![-2.1972], vec![vec![]]).unwrap(),
        ]);
        let row = gating_probabilities(&skew, 1, Some(&[])).unwrap();
        let oracle = 1.0 / (1.0 + 2.1972f64.exp());
        assert!((row[0] - oracle).abs() < 1e-14);
        assert!((row[0] - 0.1).abs() < 1e-4);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gating_logit_missing_w_is_config_error() {
        let gating = GatingSpec::LogitModel(vec![
            LogitRow::new(vec![0.3], vec![vec![1.0, -0.5]]).unwrap(),
            LogitRow::new(vec![-0.2], vec![vec![0.0, 0.7]]).unwrap(),
        ]);
        assert!(matches!(gating_probabilities(&gating, 0, None), Err(Error::Config(_))));
        let ok = gating_probabilities(&gating, 0, Some(&[0.4, 1.1])).unwrap();
        assert!((ok.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derive_reclassification_matches_displayed_matrix() {
        let (pi_star, q) = derive_reclassification(&paper_p(), &[0.2, 0.3, 0.5]).unwrap();
        let expected_pi_star = [0.215, 0.315, 0.47];
        for (a, b) in pi_star.iter().zip(expected_pi_star) {
            assert!((a - b).abs() < 1e-12);
        }
        // displayed to two decimals
        let shown = [
            [0.74, 0.14, 0.12],
            [0.10, 0.67, 0.24],
            [0.02, 0.13, 0.85],
        ];
        for k in 0..3 {
            for j in 0..3 {
                assert!(
                    (q.entry(k, j) - shown[k][j]).abs() <= 0.005,
                    "q[{k}][{j}] = {} vs {}",
                    q.entry(k, j),
                    shown[k][j]
                );
            }
        }
        assert!((q.entry(0, 0) - 0.8 * 0.2 / 0.215).abs() < 1e-12);
    }

    #[test]
    fn derive_reclassification_identity_passthrough() {
        let p = ClassificationMatrix::identity(3);
        let pi = [0.2, 0.3, 0.5];
        let (pi_star, q) = derive_reclassification(&p, &pi).unwrap();
        for (a, b) in pi_star.iter().zip(pi) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(q, ReclassificationMatrix::identity(3));
    }

    #[test]
    fn derive_reclassification_degenerate_category() {
        // category 1 can never be observed
        let p = ClassificationMatrix::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            derive_reclassification(&p, &[0.5, 0.5]),
            Err(Error::DegenerateCategory(1))
        ));
    }

    #[test]
    fn mixture_loglik_brute_force_three_rows() {
        let k = 2;
        let q = ReclassificationMatrix::new(vec![vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let theta = Theta {
            alpha0: 1.0,
            alpha1: 2.5,
            beta: vec![],
            nuisance: Nuisance::Normal { sigma: 1.3 },
            pi_star: vec![0.4, 0.6],
            gating: GatingSpec::ConstantMatrix(q.clone()),
        };
        let spec = ModelSpec::new(ResponseFamily::of(FamilyKind::Normal), k);
        let data =
            Dataset::new(vec![0.7, 3.4, 2.2], vec![0, 1, 0], None, None).unwrap();
        let got = mixture_loglik(&spec, &theta, &data).unwrap();

        // brute force: enumerate both latent values per row
        let mut expected = 0.0;
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..k {
                let mean = theta.alpha0 + theta.alpha1 * j as f64;
                let dens = (-0.5 * LN_2PI).exp() / 1.3
                    * (-0.5 * ((data.y[i] - mean) / 1.3).powi(2)).exp();
                s += q.entry(data.v_star[i], j) * dens;
            }
            expected += theta.pi_star[data.v_star[i]].ln() + s.ln();
        }
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn mixture_loglik_identity_q_equals_complete_data() {
        let spec = ModelSpec::new(ResponseFamily::of(FamilyKind::Normal), 3);
        let theta = Theta {
            alpha0: 12.0,
            alpha1: 10.0,
            beta: vec![],
            nuisance: Nuisance::Normal { sigma: 2.0 },
            pi_star: vec![0.215, 0.315, 0.47],
            gating: GatingSpec::ConstantMatrix(ReclassificationMatrix::identity(3)),
        };
        let data = Dataset::new(
            vec![11.2, 22.8, 31.9, 12.4, 33.0],
            vec![0, 1, 2, 0, 2],
            None,
            None,
        )
        .unwrap();
        let got = mixture_loglik(&spec, &theta, &data).unwrap();
        let mut expected = 0.0;
        for i in 0..data.n_rows() {
            expected += theta.pi_star[data.v_star[i]].ln()
                + normal_logpdf(data.y[i], 12.0 + 10.0 * data.v_star[i] as f64, 2.0);
        }
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn mixture_loglik_reducible_invariant_to_q() {
        // alpha1 = 0: components coincide, any valid Q gives the same value
        let spec = ModelSpec::new(ResponseFamily::of(FamilyKind::Normal), 2);
        let data = Dataset::new(vec![0.3, -1.1, 0.9, 2.0], vec![0, 1, 1, 0], None, None).unwrap();
        let base = Theta {
            alpha0: 0.4,
            alpha1: 0.0,
            beta: vec![],
            nuisance: Nuisance::Normal { sigma: 0.9 },
            pi_star: vec![0.35, 0.65],
            gating: GatingSpec::ConstantMatrix(
                ReclassificationMatrix::new(vec![vec![0.6, 0.4], vec![0.25, 0.75]]).unwrap(),
            ),
        };
        let mut other = base.clone();
        other.gating = GatingSpec::ConstantMatrix(
            ReclassificationMatrix::new(vec![vec![0.12, 0.88], vec![0.5, 0.5]]).unwrap(),
        );
        let a = mixture_loglik(&spec, &base, &data).unwrap();
        let b = mixture_loglik(&spec, &other, &data).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn reclassification_round_trip_recovers_p_and_pi() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let k = 4;
            let mut rows = Vec::new();
            for _ in 0..k {
                let mut r: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= s);
                rows.push(r);
            }
            let p = ClassificationMatrix::new(rows).unwrap();
            let mut pi: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|v| *v /= s);

            let (pi_star, q) = derive_reclassification(&p, &pi).unwrap();
            // joint table computed either direction must agree
            for j in 0..k {
                for kk in 0..k {
                    let lhs = pi[j] * p.entry(j, kk);
                    let rhs = pi_star[kk] * q.entry(kk, j);
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
            let (pi_back, p_back) = derive_classification(&q, &pi_star).unwrap();
            for j in 0..k {
                assert!((pi_back[j] - pi[j]).abs() < 1e-10);
                for kk in 0..k {
                    assert!((p_back.entry(j, kk) - p.entry(j, kk)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn gating_rows_sum_to_one_randomized() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = rng.gen_range(2..5usize);
            let m = rng.gen_range(0..3usize);
            let rows: Vec<LogitRow> = (0..k)
                .map(|_| {
                    let intercepts = (0..k - 1).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let coefs = (0..k - 1)
                        .map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
                        .collect();
                    LogitRow::new(intercepts, coefs).unwrap()
                })
                .collect();
            let gating = GatingSpec::LogitModel(rows);
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for v_star in 0..k {
                let row = gating_probabilities(&gating, v_star, Some(&w)).unwrap();
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn matrix_row_sum_validation() {
        assert!(ClassificationMatrix::new(vec![vec![0.9, 0.2], vec![0.5, 0.5]]).is_err());
        assert!(ClassificationMatrix::new(vec![vec![1.1, -0.1], vec![0.5, 0.5]]).is_err());
        assert!(ReclassificationMatrix::new(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).is_ok());
    }
}
