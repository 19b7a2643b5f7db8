//! Conventional estimators of a single treatment coefficient: pooled OLS,
//! the semiparametric g-estimator and pooled logistic regression, with
//! Monte Carlo approximations of the limits of the first two.
//!
//! Under effect heterogeneity these target variance-weighted averages of
//! the trial-specific effects rather than any of the model-free estimands.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::estimators::{EstimateReport, MethodKind, Scale, Target};
use crate::glm::{self, FittedModel, Link, ModelSpec, Response, RowFilter, Term};
use crate::mestim::{EstimatingSystem, UnitEquations};
use crate::panel::{OutcomeFamily, PanelDataset};
use crate::simgen::oracle::{Moments, MIN_MC_N};
use crate::simgen::{for_each_patient, DgpSpec, OracleLimit, SimRow};

const LEVEL: f64 = 0.95;

/// Regressors of the pooled linear model besides treatment: every
/// time-varying covariate and the lagged outcome.
pub fn default_terms(ds: &PanelDataset) -> Vec<Term> {
    let mut terms: Vec<Term> = (0..ds.covariate_names().len()).map(Term::Covariate).collect();
    terms.push(Term::LaggedOutcome);
    terms
}

struct ClusterRows {
    x: Vec<f64>,
    y: Vec<f64>,
}

/// Fits `spec` and returns the coefficient at `index` with a sandwich SE
/// clustered by patient.
fn coefficient_report(
    ds: &PanelDataset,
    spec: ModelSpec,
    index: usize,
    method: MethodKind,
    scale: Scale,
) -> Result<EstimateReport> {
    let model = glm::fit(&spec, ds)?;
    let p = spec.n_coefficients();
    let obs = ds.observations();
    let mut buf = Vec::with_capacity(p);
    let units: Vec<ClusterRows> = ds
        .clusters()
        .iter()
        .map(|r| {
            let mut c = ClusterRows { x: Vec::new(), y: Vec::new() };
            for o in &obs[r.clone()] {
                if spec.filter.matches(o) {
                    spec.design_row(o, &[], &mut buf);
                    c.x.extend_from_slice(&buf);
                    c.y.push(spec.response.value(o));
                }
            }
            c
        })
        .collect();
    let link = spec.link;
    let eq = UnitEquations {
        units: &units,
        dim: p,
        psi: move |c: &ClusterRows, beta: &[f64], out: &mut [f64]| {
            let mut s = vec![0.0; beta.len()];
            for (x, &y) in c.x.chunks_exact(beta.len()).zip(&c.y) {
                glm::score_row(link, x, y, beta, &mut s);
                for (o, v) in out.iter_mut().zip(&s) {
                    *o += v;
                }
            }
        },
    };
    let system = EstimatingSystem::new(eq, model.coefficients.clone())?;
    let vcov = system.covariance()?;
    let se = libm::sqrt(vcov[(index, index)].max(0.0));
    Ok(EstimateReport::new(Target::Coefficient, method, scale, model.coefficients[index], se, LEVEL))
}

/// Treatment coefficient of `Y_t ~ 1 + terms + A_t` fitted by least squares
/// over all eligible rows, with patient-clustered sandwich SE.
pub fn pooled_ols(ds: &PanelDataset, terms: &[Term]) -> Result<EstimateReport> {
    if ds.outcome_family() != OutcomeFamily::Continuous {
        return Err(invalid("pooled OLS needs a continuous outcome"));
    }
    let mut all = terms.to_vec();
    all.push(Term::Treatment);
    let spec = ModelSpec {
        response: Response::Outcome,
        intercept: true,
        terms: all,
        link: Link::Identity,
        filter: RowFilter::eligible(),
    };
    let index = spec.n_coefficients() - 1;
    coefficient_report(ds, spec, index, MethodKind::PooledOls, Scale::RiskDifference)
}

fn logistic_spec(ds: &PanelDataset, terms: &[Term], include_time: bool, filter: RowFilter) -> Result<ModelSpec> {
    if ds.outcome_family() != OutcomeFamily::Binary {
        return Err(invalid("logistic regression needs a binary outcome"));
    }
    let mut all = terms.to_vec();
    if include_time {
        all.push(Term::Time);
    }
    let spec = ModelSpec { response: Response::Outcome, intercept: true, terms: all, link: Link::Logit, filter }
        .without_zero_terms(ds);
    let mut spec = spec;
    spec.terms.push(Term::Treatment);
    Ok(spec)
}

/// Treatment log-odds ratio of a logistic regression over pooled eligible rows.
pub fn pooled_logistic_mle(ds: &PanelDataset, terms: &[Term], include_time: bool) -> Result<EstimateReport> {
    let spec = logistic_spec(ds, terms, include_time, RowFilter::eligible())?;
    let index = spec.n_coefficients() - 1;
    coefficient_report(ds, spec, index, MethodKind::PooledLogistic, Scale::LogOdds)
}

/// Treatment log-odds ratio of a logistic regression within trial `t`.
pub fn trial_logistic_mle(ds: &PanelDataset, terms: &[Term], t: u32) -> Result<EstimateReport> {
    if t == 0 || t > ds.tau() {
        return Err(invalid(format!("trial t={t} outside 1..={}", ds.tau())));
    }
    let spec = logistic_spec(ds, terms, false, RowFilter::eligible_at(t))?;
    let index = spec.n_coefficients() - 1;
    coefficient_report(ds, spec, index, MethodKind::PooledLogistic, Scale::LogOdds)
}

/// Propensity models used by the g-estimator.
#[derive(Debug, Clone, Copy)]
pub enum PropensitySource<'a> {
    /// One model per trial, indexed by `t − 1`.
    PerTrial(&'a [Option<FittedModel>]),
    /// One model fitted over all eligible rows.
    Pooled(&'a FittedModel),
}

impl PropensitySource<'_> {
    fn models(&self) -> Vec<&FittedModel> {
        match self {
            PropensitySource::PerTrial(m) => m.iter().flatten().collect(),
            PropensitySource::Pooled(m) => vec![*m],
        }
    }

    /// Index into `models()` of the model covering trial `t`.
    fn block(&self, t: u32) -> Option<usize> {
        match self {
            PropensitySource::PerTrial(m) => {
                let slot = (t as usize).checked_sub(1)?;
                m.get(slot)?.as_ref()?;
                Some(m[..slot].iter().filter(|x| x.is_some()).count())
            }
            PropensitySource::Pooled(_) => Some(0),
        }
    }
}

/// `Σ I (A − e) Y / Σ I (A − e) A` over eligible rows for supplied propensities `e`.
pub fn g_estimate_with_values(ds: &PanelDataset, propensity: &[f64]) -> Result<f64> {
    let obs = ds.observations();
    if propensity.len() != obs.len() {
        return Err(invalid("one propensity value per row is required"));
    }
    let (mut num, mut den, mut scale) = (0.0, 0.0, 0.0);
    for (o, &e) in obs.iter().zip(propensity) {
        if o.eligible {
            let a = f64::from(u8::from(o.treated));
            num += (a - e) * o.outcome;
            den += (a - e) * a;
            scale += a;
        }
    }
    if !(den.abs() > 1e-12 * scale.max(1.0)) {
        return Err(Error::Undefined("g-estimator denominator is zero: no residual treatment variation".into()));
    }
    Ok(num / den)
}

struct GRow {
    block: usize,
    x: Vec<f64>,
    a: f64,
    y: f64,
}

/// Semiparametric g-estimator of a constant effect with the propensity
/// scores stacked into the sandwich.
pub fn g_estimate(ds: &PanelDataset, propensity: PropensitySource<'_>) -> Result<EstimateReport> {
    let models = propensity.models();
    let mut offsets = Vec::with_capacity(models.len());
    let mut dim = 0;
    for m in &models {
        if m.spec.response != Response::Treatment {
            return Err(invalid("propensity models must have treatment as response"));
        }
        offsets.push(dim);
        dim += m.coefficients.len();
    }
    let obs = ds.observations();
    let mut e = vec![0.0; obs.len()];
    let mut units: Vec<Vec<GRow>> = Vec::with_capacity(ds.n_clusters());
    for r in ds.clusters() {
        let mut rows = Vec::new();
        for i in r.clone() {
            let o = &obs[i];
            if !o.eligible {
                continue;
            }
            let block = propensity
                .block(o.t)
                .ok_or_else(|| invalid(format!("no propensity model for trial t={}", o.t)))?;
            let m = models[block];
            let mut x = Vec::new();
            m.spec.design_row(o, &[], &mut x);
            e[i] = m.spec.link.inverse(m.linear_predictor(&x));
            rows.push(GRow { block, x, a: f64::from(u8::from(o.treated)), y: o.outcome });
        }
        units.push(rows);
    }
    let psi = g_estimate_with_values(ds, &e)?;
    let links: Vec<(usize, usize, Link)> =
        models.iter().zip(&offsets).map(|(m, &off)| (off, m.coefficients.len(), m.spec.link)).collect();
    let eq = UnitEquations {
        units: &units,
        dim: dim + 1,
        psi: |rows: &Vec<GRow>, theta: &[f64], out: &mut [f64]| {
            let psi = theta[dim];
            for r in rows {
                let (off, p, link) = links[r.block];
                let beta = &theta[off..off + p];
                let eta: f64 = r.x.iter().zip(beta).map(|(a, b)| a * b).sum();
                let f = link.score_factor(eta, r.a);
                for (o, &xi) in out[off..off + p].iter_mut().zip(&r.x) {
                    *o += xi * f;
                }
                out[dim] += (r.a - link.inverse(eta)) * (r.y - psi * r.a);
            }
        },
    };
    let mut theta: Vec<f64> = models.iter().flat_map(|m| m.coefficients.iter().copied()).collect();
    theta.push(psi);
    let system = EstimatingSystem::new(eq, theta)?;
    let vcov = system.covariance()?;
    let se = libm::sqrt(vcov[(dim, dim)].max(0.0));
    Ok(EstimateReport::new(Target::Coefficient, MethodKind::GEstimation, Scale::RiskDifference, psi, se, LEVEL))
}

/// Streams the oracle draw cluster by cluster.
fn for_each_cluster(dgp: &DgpSpec, mc_n: usize, seed: u64, mut f: impl FnMut(&[SimRow])) {
    let mut current = usize::MAX;
    let mut rows: Vec<SimRow> = Vec::new();
    for_each_patient(dgp, mc_n, seed, 0, |c, _, r| {
        if c != current {
            if current != usize::MAX {
                f(&rows);
            }
            rows.clear();
            current = c;
        }
        rows.extend_from_slice(r);
    });
    if current != usize::MAX {
        f(&rows);
    }
}

fn check_oracle(dgp: &DgpSpec, mc_n: usize) -> Result<()> {
    dgp.validate()?;
    if mc_n < MIN_MC_N {
        return Err(invalid("oracle draws need mc_n >= 100000"));
    }
    Ok(())
}

/// Limit of the pooled OLS treatment coefficient (regressors `1, L_t,
/// Y_{t−1}`) as the sum of a weighted effect and a misspecification term:
///
/// ```text
/// { Σ_t E[I_t π(1 − π̃)(Y¹ − Y⁰)] + Σ_t E[I_t (π − π̃) Y⁰] } / Σ_t E[I_t π(1 − π̃)]
/// ```
///
/// where `π̃` is the least-squares projection of `A_t` on the regressors
/// among eligible rows, estimated on the same draw. The MC standard error
/// accounts for estimating `π̃`.
pub fn ols_population_limit(dgp: &DgpSpec, mc_n: usize, seed: u64) -> Result<OracleLimit> {
    check_oracle(dgp, mc_n)?;
    const K: usize = 3;
    let x_of = |r: &SimRow| [1.0, r.l, r.y_lag];
    let mut xtx = DMatrix::<f64>::zeros(K, K);
    let mut xta = DVector::<f64>::zeros(K);
    for_each_cluster(dgp, mc_n, seed, |rows| {
        for r in rows.iter().filter(|r| r.eligible) {
            let x = x_of(r);
            let a = f64::from(u8::from(r.treated));
            for i in 0..K {
                xta[i] += x[i] * a;
                for j in 0..K {
                    xtx[(i, j)] += x[i] * x[j];
                }
            }
        }
    });
    let m = mc_n as f64;
    let chol = nalgebra::Cholesky::new(xtx.clone() / m).ok_or(Error::Singular("projection of treatment"))?;
    let alpha = chol.solve(&(xta / m));
    // z = (N_c, D_c, s_c) per cluster; gradient sums of N and D in α.
    let mut mom = Moments::new(2 + K);
    let (mut g_num, mut g_den) = ([0.0; K], [0.0; K]);
    for_each_cluster(dgp, mc_n, seed, |rows| {
        let mut z = [0.0; 2 + K];
        for r in rows.iter().filter(|r| r.eligible) {
            let x = x_of(r);
            let tilde: f64 = (0..K).map(|k| x[k] * alpha[k]).sum();
            let pi = r.propensity;
            let a = f64::from(u8::from(r.treated));
            let delta = r.mu1 - r.mu0;
            z[0] += pi * (1.0 - tilde) * delta + (pi - tilde) * r.mu0;
            z[1] += pi * (1.0 - tilde);
            for k in 0..K {
                z[2 + k] += x[k] * (a - tilde);
                g_num[k] -= x[k] * (pi * delta + r.mu0);
                g_den[k] -= x[k] * pi;
            }
        }
        mom.push(&z);
    });
    let mean = mom.mean();
    if !(mean[1].abs() > 0.0) {
        return Err(Error::Undefined("OLS limit denominator is zero".into()));
    }
    let limit = mean[0] / mean[1];
    // Influence of α̂: ∂limit/∂α · (XᵀX/m)⁻¹ s_c.
    let grad = DVector::from_iterator(K, (0..K).map(|k| (g_num[k] - limit * g_den[k]) / m / mean[1]));
    let c = chol.solve(&grad);
    let (value, mc_se) = mom.linearized(|z| z[0] / z[1] + (0..K).map(|k| c[k] * z[2 + k]).sum::<f64>());
    debug_assert!((value - limit).abs() <= 1e-9 * (1.0 + limit.abs()));
    Ok(OracleLimit { limit, mc_se, mc_n, seed })
}

/// Limit of the g-estimator with a correct propensity model:
/// `Σ_t E[I_t π(1 − π)(Y¹ − Y⁰)] / Σ_t E[I_t π(1 − π)]`.
pub fn g_population_limit(dgp: &DgpSpec, mc_n: usize, seed: u64) -> Result<OracleLimit> {
    check_oracle(dgp, mc_n)?;
    let mut mom = Moments::new(2);
    for_each_cluster(dgp, mc_n, seed, |rows| {
        let mut z = [0.0; 2];
        for r in rows.iter().filter(|r| r.eligible) {
            let w = r.propensity * (1.0 - r.propensity);
            z[0] += w * (r.mu1 - r.mu0);
            z[1] += w;
        }
        mom.push(&z);
    });
    if !(mom.mean()[1] > 0.0) {
        return Err(Error::Undefined("treatment variance is zero on every eligible row".into()));
    }
    let (limit, mc_se) = mom.linearized(|z| z[0] / z[1]);
    Ok(OracleLimit { limit, mc_se, mc_n, seed })
}
