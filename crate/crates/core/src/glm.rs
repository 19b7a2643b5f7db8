//! Least squares and binary regression (logit, probit) by IRLS.
//!
//! Models are described by a [`ModelSpec`] over the columns of a
//! [`PanelDataset`]; the numerical core works on a dense design matrix and is
//! exposed as [`fit_design`] for callers that assemble their own rows.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::math::{expit, norm_cdf, norm_pdf};
use crate::panel::{Observation, PanelDataset};

const SCORE_TOL: f64 = 1e-10;
const MAX_ITER: usize = 100;
const RANK_TOL: f64 = 1e-10;
const BOUNDARY: f64 = 1e-8;
const DIVERGENCE_NORM: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Link {
    Identity,
    Logit,
    Probit,
}

/// Mean, complement of the mean and `dμ/dη` at one linear predictor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinkEval {
    pub mu: f64,
    pub one_minus_mu: f64,
    pub dmu: f64,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
            Link::Probit => norm_cdf(eta),
        }
    }

    pub(crate) fn eval(self, eta: f64) -> LinkEval {
        match self {
            Link::Identity => LinkEval { mu: eta, one_minus_mu: 1.0 - eta, dmu: 1.0 },
            Link::Logit => {
                let mu = expit(eta);
                let c = expit(-eta);
                LinkEval { mu, one_minus_mu: c, dmu: mu * c }
            }
            Link::Probit => LinkEval { mu: norm_cdf(eta), one_minus_mu: norm_cdf(-eta), dmu: norm_pdf(eta) },
        }
    }

    /// Per-row score factor: the multiplier of `x` in the score contribution.
    pub(crate) fn score_factor(self, eta: f64, y: f64) -> f64 {
        match self {
            Link::Identity => y - eta,
            Link::Logit => y - expit(eta),
            Link::Probit => {
                let e = self.eval(eta);
                let v = (e.mu * e.one_minus_mu).max(f64::MIN_POSITIVE);
                (y - e.mu) * e.dmu / v
            }
        }
    }
}

/// A column of the design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Term {
    /// Time-varying covariate `L_t` by schema index.
    Covariate(usize),
    /// Baseline covariate `L_1` by schema index.
    Baseline(usize),
    LaggedOutcome,
    Time,
    Treatment,
}

impl Term {
    pub fn name(&self, ds: &PanelDataset) -> String {
        match *self {
            Term::Covariate(i) => ds.covariate_names()[i].clone(),
            Term::Baseline(i) => alloc::format!("{}_baseline", ds.covariate_names()[i]),
            Term::LaggedOutcome => "y_lag".to_string(),
            Term::Time => "t".to_string(),
            Term::Treatment => "treat".to_string(),
        }
    }

    pub fn value(&self, o: &Observation) -> f64 {
        match *self {
            Term::Covariate(i) => o.covariates[i],
            Term::Baseline(i) => o.baseline_covariates[i],
            Term::LaggedOutcome => o.lagged_outcome,
            Term::Time => f64::from(o.t),
            Term::Treatment => f64::from(u8::from(o.treated)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Response {
    Outcome,
    Treatment,
    Eligible,
}

impl Response {
    pub fn value(&self, o: &Observation) -> f64 {
        match self {
            Response::Outcome => o.outcome,
            Response::Treatment => f64::from(u8::from(o.treated)),
            Response::Eligible => f64::from(u8::from(o.eligible)),
        }
    }
}

/// Row subset a model is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RowFilter {
    pub t: Option<u32>,
    pub eligible_only: bool,
    pub arm: Option<bool>,
}

impl RowFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn eligible() -> Self {
        RowFilter { eligible_only: true, ..Self::default() }
    }

    pub fn eligible_at(t: u32) -> Self {
        RowFilter { t: Some(t), eligible_only: true, arm: None }
    }

    pub fn arm_at(t: u32, treated: bool) -> Self {
        RowFilter { t: Some(t), eligible_only: true, arm: Some(treated) }
    }

    pub fn matches(&self, o: &Observation) -> bool {
        self.t.is_none_or(|t| o.t == t)
            && (!self.eligible_only || o.eligible)
            && self.arm.is_none_or(|a| o.treated == a)
    }

    pub fn rows(&self, ds: &PanelDataset) -> Vec<usize> {
        ds.observations()
            .iter()
            .enumerate()
            .filter(|(_, o)| self.matches(o))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub response: Response,
    pub intercept: bool,
    pub terms: Vec<Term>,
    pub link: Link,
    pub filter: RowFilter,
}

impl ModelSpec {
    pub fn n_coefficients(&self) -> usize {
        usize::from(self.intercept) + self.terms.len()
    }

    /// Design row for `o`, with `overrides` replacing individual term values.
    pub fn design_row(&self, o: &Observation, overrides: &[(Term, f64)], out: &mut Vec<f64>) {
        out.clear();
        if self.intercept {
            out.push(1.0);
        }
        for term in &self.terms {
            let v = overrides
                .iter()
                .find(|(k, _)| k == term)
                .map_or_else(|| term.value(o), |&(_, v)| v);
            out.push(v);
        }
    }

    /// Drops terms that are identically zero on the fit subset (e.g. the lagged
    /// outcome in the first trial), which would otherwise make the design singular.
    pub fn without_zero_terms(mut self, ds: &PanelDataset) -> Self {
        let rows = self.filter.rows(ds);
        let obs = ds.observations();
        self.terms.retain(|term| rows.iter().any(|&i| term.value(&obs[i]) != 0.0));
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n_used: usize,
}

impl FittedModel {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum()
    }
}

/// Result of the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
}

/// Fits `spec` on the rows selected by its filter.
pub fn fit(spec: &ModelSpec, ds: &PanelDataset) -> Result<FittedModel> {
    let rows = spec.filter.rows(ds);
    let p = spec.n_coefficients();
    if p == 0 {
        return Err(invalid("model has neither intercept nor terms"));
    }
    if rows.len() < p + 1 {
        return Err(invalid(alloc::format!(
            "model needs at least {} rows, subset has {}",
            p + 1,
            rows.len()
        )));
    }
    let obs = ds.observations();
    let mut x = Vec::with_capacity(rows.len() * p);
    let mut y = Vec::with_capacity(rows.len());
    let mut buf = Vec::with_capacity(p);
    for &i in &rows {
        spec.design_row(&obs[i], &[], &mut buf);
        x.extend_from_slice(&buf);
        y.push(spec.response.value(&obs[i]));
    }
    let f = fit_design(&x, &y, p, spec.link)?;
    Ok(FittedModel {
        spec: spec.clone(),
        coefficients: f.coefficients,
        converged: true,
        iterations: f.iterations,
        n_used: rows.len(),
    })
}

/// Mean predictions on `rows`; `overrides` are keyed by term name
/// (`treat`, `t`, `y_lag`, covariate names, `<name>_baseline`).
pub fn predict_mean(
    model: &FittedModel,
    ds: &PanelDataset,
    rows: &[usize],
    overrides: &[(&str, f64)],
) -> Result<Vec<f64>> {
    let mut resolved = Vec::with_capacity(overrides.len());
    for &(name, v) in overrides {
        let term = model
            .spec
            .terms
            .iter()
            .find(|t| t.name(ds) == name)
            .copied()
            .or_else(|| term_by_name(ds, name))
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))?;
        resolved.push((term, v));
    }
    let obs = ds.observations();
    let mut buf = Vec::new();
    Ok(rows
        .iter()
        .map(|&i| {
            model.spec.design_row(&obs[i], &resolved, &mut buf);
            model.spec.link.inverse(model.linear_predictor(&buf))
        })
        .collect())
}

/// Term for a column name: `treat`, `t`, `y_lag`, a covariate name or `<name>_baseline`.
pub fn term_by_name(ds: &PanelDataset, name: &str) -> Option<Term> {
    match name {
        "treat" => Some(Term::Treatment),
        "t" => Some(Term::Time),
        "y_lag" => Some(Term::LaggedOutcome),
        _ => {
            if let Some(i) = ds.covariate_index(name) {
                return Some(Term::Covariate(i));
            }
            let base = name.strip_suffix("_baseline")?;
            ds.covariate_index(base).map(Term::Baseline)
        }
    }
}

/// Fits a model to a row-major `n × p` design matrix.
///
/// Identity link: least squares by QR. Logit/probit: IRLS from zero with
/// step halving, stopping once the mean score is below `1e-10` in every
/// coordinate (plus one polishing Newton step).
pub fn fit_design(x: &[f64], y: &[f64], p: usize, link: Link) -> Result<DesignFit> {
    let n = y.len();
    if p == 0 || x.len() != n * p {
        return Err(invalid("design matrix shape does not match response"));
    }
    if n < p {
        return Err(invalid("fewer rows than coefficients"));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in design or response"));
    }
    let xm = DMatrix::from_row_slice(n, p, x);
    let yv = DVector::from_column_slice(y);
    if link == Link::Identity {
        let beta = least_squares(&xm, &yv)?;
        return Ok(DesignFit { coefficients: beta.iter().copied().collect(), iterations: 1 });
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("binary regression requires a 0/1 response"));
    }
    // Reject structural rank deficiency before iterating.
    least_squares(&xm, &DVector::zeros(n))?;

    let mut beta = DVector::zeros(p);
    let mut dev = deviance(&xm, &yv, &beta, link);
    let mut last_step = f64::INFINITY;
    for iter in 1..=MAX_ITER {
        let eta = &xm * &beta;
        let mut score = DVector::<f64>::zeros(p);
        let mut wx = xm.clone();
        let mut wz = DVector::<f64>::zeros(n);
        for i in 0..n {
            let e = link.eval(eta[i]);
            let v = (e.mu * e.one_minus_mu).max(f64::MIN_POSITIVE);
            let w = e.dmu * e.dmu / v;
            let sw = libm::sqrt(w);
            let resid = y[i] - e.mu;
            let factor = resid * e.dmu / v;
            for j in 0..p {
                score[j] += xm[(i, j)] * factor;
                wx[(i, j)] *= sw;
            }
            // Working response for the Newton step `δ` (not for β itself).
            wz[i] = if sw > 0.0 { resid * e.dmu / v / sw } else { 0.0 };
        }
        let max_score = score.amax() / n as f64;
        if !max_score.is_finite() {
            return Err(Error::Numerical("non-finite score in IRLS".into()));
        }
        // A small score alone is not enough: under separation the score
        // vanishes while the coefficients keep drifting outward.
        if max_score <= SCORE_TOL && last_step <= 1e-8 * (1.0 + beta.amax()) {
            check_separation(&xm, &beta, link)?;
            return Ok(DesignFit { coefficients: beta.iter().copied().collect(), iterations: iter - 1 });
        }
        let delta = match least_squares(&wx, &wz) {
            Ok(d) => d,
            // Weights collapse to zero only when fitted means sit on the boundary.
            Err(_) if near_boundary(&xm, &beta, link) => return Err(Error::Separation),
            Err(e) => return Err(e),
        };
        let mut step = 1.0;
        let mut candidate = &beta + &delta;
        let mut cand_dev = deviance(&xm, &yv, &candidate, link);
        while !(cand_dev <= dev + 1e-12 * dev.abs().max(1.0)) && step > 1e-6 {
            step *= 0.5;
            candidate = &beta + &delta * step;
            cand_dev = deviance(&xm, &yv, &candidate, link);
        }
        last_step = (&candidate - &beta).amax();
        beta = candidate;
        dev = cand_dev;
        if beta.norm() > DIVERGENCE_NORM && near_boundary(&xm, &beta, link) {
            return Err(Error::Separation);
        }
    }
    if near_boundary(&xm, &beta, link) {
        return Err(Error::Separation);
    }
    Err(Error::NonConvergence { iterations: MAX_ITER })
}

fn check_separation(x: &DMatrix<f64>, beta: &DVector<f64>, link: Link) -> Result<()> {
    if beta.norm() > DIVERGENCE_NORM && near_boundary(x, beta, link) {
        Err(Error::Separation)
    } else {
        Ok(())
    }
}

fn near_boundary(x: &DMatrix<f64>, beta: &DVector<f64>, link: Link) -> bool {
    (x * beta).iter().any(|&eta| {
        let e = link.eval(eta);
        e.mu < BOUNDARY || e.one_minus_mu < BOUNDARY
    })
}

fn deviance(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, link: Link) -> f64 {
    let eta = x * beta;
    let mut d = 0.0;
    for i in 0..y.len() {
        let e = link.eval(eta[i]);
        let p = if y[i] == 1.0 { e.mu } else { e.one_minus_mu };
        d -= 2.0 * libm::log(p.max(1e-300));
    }
    d
}

/// Least squares by Householder QR with a relative rank check on `R`.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let p = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    for k in 0..p {
        if r[(k, k)].abs() <= RANK_TOL * max_diag || max_diag == 0.0 {
            return Err(Error::RankDeficient { column: k });
        }
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or(Error::Singular("triangular factor"))
}

/// Score contribution `x · factor` of one row at `beta`.
pub fn score_row(link: Link, x: &[f64], y: f64, beta: &[f64], out: &mut [f64]) {
    let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
    let f = link.score_factor(eta, y);
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = xi * f;
    }
}

/// Sum of score contributions over a row-major design.
pub fn total_score(link: Link, x: &[f64], y: &[f64], beta: &[f64]) -> Vec<f64> {
    let p = beta.len();
    let mut total = vec![0.0; p];
    let mut buf = vec![0.0; p];
    for (row, &yi) in x.chunks_exact(p).zip(y) {
        score_row(link, row, yi, beta, &mut buf);
        for (t, b) in total.iter_mut().zip(&buf) {
            *t += b;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Design, RawRecord};
    use proptest::prelude::*;

    fn log_lik(x: &[f64], y: &[f64], beta: &[f64], link: Link) -> f64 {
        let p = beta.len();
        x.chunks_exact(p)
            .zip(y)
            .map(|(row, &yi)| {
                let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
                let mu = link.inverse(eta);
                if yi == 1.0 { mu.ln() } else { (1.0 - mu).ln() }
            })
            .sum()
    }

    /// Coordinate-wise golden-section search on the log-likelihood, shrinking
    /// the bracket each sweep; independent of IRLS and of any derivative.
    fn likelihood_search(x: &[f64], y: &[f64], p: usize, link: Link) -> Vec<f64> {
        let mut beta = vec![0.0; p];
        let mut width = 8.0;
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            for j in 0..p {
                let (mut lo, mut hi) = (beta[j] - width, beta[j] + width);
                let f = |v: f64, b: &mut Vec<f64>| {
                    b[j] = v;
                    -log_lik(x, y, b, link)
                };
                let mut b = beta.clone();
                for _ in 0..100 {
                    let c = hi - g * (hi - lo);
                    let d = lo + g * (hi - lo);
                    if f(c, &mut b) < f(d, &mut b) {
                        hi = d;
                    } else {
                        lo = c;
                    }
                }
                beta[j] = 0.5 * (lo + hi);
            }
            width = (width * 0.7).max(1e-3);
        }
        beta
    }

    fn thirty_rows() -> (Vec<f64>, Vec<f64>) {
        // Deterministic, overlapping design: y flips with a noisy threshold in x.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..30 {
            let xi = -1.5 + 0.1 * i as f64;
            let wobble = ((i * 7) % 5) as f64 * 0.3 - 0.6;
            x.extend_from_slice(&[1.0, xi]);
            y.push(if xi + wobble > 0.0 { 1.0 } else { 0.0 });
        }
        (x, y)
    }

    #[test]
    fn intercept_only_logit_is_sample_log_odds() {
        let f = fit_design(&[1.0; 4], &[1.0, 1.0, 1.0, 0.0], 1, Link::Logit).unwrap();
        assert!((f.coefficients[0] - 3f64.ln()).abs() < 1e-8);
        let f = fit_design(&[1.0; 2], &[0.0, 1.0], 1, Link::Logit).unwrap();
        assert!(f.coefficients[0].abs() < 1e-12);
    }

    #[test]
    fn logit_and_probit_match_likelihood_search() {
        let (x, y) = thirty_rows();
        for link in [Link::Logit, Link::Probit] {
            let f = fit_design(&x, &y, 2, link).unwrap();
            let oracle = likelihood_search(&x, &y, 2, link);
            for (a, b) in f.coefficients.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6, "{link:?}: {a} vs {b}");
            }
            let s = total_score(link, &x, &y, &f.coefficients);
            assert!(s.iter().all(|v| v.abs() <= 1e-8), "{s:?}");
        }
    }

    #[test]
    fn ols_residuals_orthogonal() {
        let x = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 5.0, 1.0, -1.0];
        let y = [1.0, 2.5, 2.9, 8.0, -0.7];
        let f = fit_design(&x, &y, 2, Link::Identity).unwrap();
        let s = total_score(Link::Identity, &x, &y, &f.coefficients);
        assert!(s.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn detects_rank_deficiency_and_separation() {
        let x = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert!(matches!(
            fit_design(&x, &[1.0, 2.0, 3.0], 2, Link::Identity),
            Err(Error::RankDeficient { column: 1 })
        ));
        let x = [1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0];
        assert_eq!(fit_design(&x, &[0.0, 0.0, 1.0, 1.0], 2, Link::Logit), Err(Error::Separation));
    }

    fn small_ds() -> PanelDataset {
        let rec = |id: &str, x: f64, a: bool| RawRecord {
            patient_id: id.to_string(),
            t: 1,
            eligible: None,
            treated: a,
            covariates: vec![x],
            outcome: 0.0,
        };
        PanelDataset::new(
            vec!["x".to_string()],
            vec![rec("a", 3.0, false), rec("b", 0.0, true), rec("c", 1.0, false)],
            Design::VisitTime,
            None,
        )
        .unwrap()
    }

    #[test]
    fn predict_mean_links_and_overrides() {
        let ds = small_ds();
        let model = |link, coefficients: Vec<f64>, terms: Vec<Term>| FittedModel {
            spec: ModelSpec { response: Response::Outcome, intercept: true, terms, link, filter: RowFilter::all() },
            coefficients,
            converged: true,
            iterations: 0,
            n_used: 3,
        };
        let lin = model(Link::Identity, vec![1.0, 2.0], vec![Term::Covariate(0)]);
        assert_eq!(predict_mean(&lin, &ds, &[0], &[]).unwrap(), vec![7.0]);
        let logit = model(Link::Logit, vec![0.0], vec![]);
        assert_eq!(predict_mean(&logit, &ds, &[0, 1, 2], &[]).unwrap(), vec![0.5; 3]);
        let probit = model(Link::Probit, vec![0.0, 1.0], vec![Term::Covariate(0)]);
        assert_eq!(predict_mean(&probit, &ds, &[1], &[]).unwrap(), vec![0.5]);
        let with_a = model(Link::Identity, vec![0.0, 10.0], vec![Term::Treatment]);
        assert_eq!(predict_mean(&with_a, &ds, &[0, 1], &[("treat", 1.0)]).unwrap(), vec![10.0, 10.0]);
        assert!(matches!(
            predict_mean(&with_a, &ds, &[0], &[("nope", 1.0)]),
            Err(Error::UnknownColumn(_))
        ));
    }

    proptest! {
        #[test]
        fn ols_orthogonality_holds(
            rows in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -10.0f64..10.0), 6..40)
        ) {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (a, b, r) in &rows {
                x.extend_from_slice(&[1.0, *a, *b]);
                y.push(*r);
            }
            if let Ok(f) = fit_design(&x, &y, 3, Link::Identity) {
                let s = total_score(Link::Identity, &x, &y, &f.coefficients);
                let scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>();
                prop_assert!(s.iter().all(|v| v.abs() <= 1e-8 * scale));
            }
        }

        #[test]
        fn logit_probit_sign_agree_on_symmetric_data(
            xs in proptest::collection::vec(0.1f64..3.0, 4..12),
            flip in proptest::collection::vec(any::<bool>(), 4..12),
        ) {
            // Mirror every point so the data are balanced and symmetric around zero.
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (xi, f) in xs.iter().zip(&flip) {
                let yi = if *f { 1.0 } else { 0.0 };
                x.extend_from_slice(&[1.0, *xi, 1.0, -*xi]);
                y.extend_from_slice(&[yi, 1.0 - yi]);
            }
            let l = fit_design(&x, &y, 2, Link::Logit);
            let p = fit_design(&x, &y, 2, Link::Probit);
            if let (Ok(l), Ok(p)) = (l, p) {
                prop_assert!(l.coefficients[1].signum() == p.coefficients[1].signum()
                    || l.coefficients[1].abs() < 1e-9);
                prop_assert!(l.coefficients[0].abs() < 1e-8 && p.coefficients[0].abs() < 1e-8);
            }
        }
    }
}
