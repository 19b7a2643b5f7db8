//! IPW and G-computation estimators of the uniform (`ψ_u`),
//! eligibility-weighted (`ψ_e`) and baseline-adjusted (`ψ_b`) effects.
//!
//! Estimation runs in three steps:
//!
//! 1. [`fit_nuisance`] fits the working models trial by trial.
//! 2. [`nuisance_values`] evaluates them on the data.
//! 3. [`plugin`] turns the values into the two counterfactual arm means;
//!    [`stack`] writes the same estimator as stacked estimating equations
//!    so that the sandwich covariance accounts for nuisance estimation.
//!
//! Every estimator produces arm means `(M1, M0)`. The risk difference is
//! `M1 − M0`; the log-odds contrast is `logit(M1) − logit(M0)`.

pub mod plugin;
pub mod stack;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Assumption, Error, Result};
use crate::glm::{self, FittedModel, Link, ModelSpec, Response, RowFilter, Term};
use crate::math::{logit, nearest_rank};
use crate::mestim::{delta_method, wald_ci, EstimatingSystem};
use crate::panel::{Design, OutcomeFamily, PanelDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Estimand {
    PsiU,
    PsiE,
    PsiB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Ipw,
    Gcomp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scale {
    RiskDifference,
    LogOdds,
}

/// What a report estimates: one of the model-free estimands, or a regression coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Target {
    PsiU,
    PsiE,
    PsiB,
    Coefficient,
}

impl From<Estimand> for Target {
    fn from(e: Estimand) -> Self {
        match e {
            Estimand::PsiU => Target::PsiU,
            Estimand::PsiE => Target::PsiE,
            Estimand::PsiB => Target::PsiB,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MethodKind {
    Ipw,
    Gcomp,
    PooledOls,
    GEstimation,
    PooledLogistic,
}

impl From<Method> for MethodKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Ipw => MethodKind::Ipw,
            Method::Gcomp => MethodKind::Gcomp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct EstimateReport {
    pub target: Target,
    pub method: MethodKind,
    pub scale: Scale,
    pub point: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub truncation_percentile: Option<f64>,
    /// Counterfactual arm means `(M1, M0)` behind the contrast, when applicable.
    pub arm_means: Option<(f64, f64)>,
}

impl EstimateReport {
    pub fn new(target: Target, method: MethodKind, scale: Scale, point: f64, se: f64, level: f64) -> Self {
        let (ci_lower, ci_upper) = wald_ci(point, se, level);
        EstimateReport {
            target,
            method,
            scale,
            point,
            se,
            ci_lower,
            ci_upper,
            level,
            truncation_percentile: None,
            arm_means: None,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

/// How the outcome regression at each trial is structured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OutcomeStructure {
    /// Separate regressions among the treated and the controls.
    ArmSpecific,
    /// One regression with a treatment term, predicted with `A` forced to 0 and 1.
    Joint,
}

/// Conditioning sets and links of the nuisance regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingModels {
    pub propensity_terms: Vec<Term>,
    pub propensity_link: Link,
    pub outcome_terms: Vec<Term>,
    pub outcome_link: Link,
    pub outcome_structure: OutcomeStructure,
    /// Baseline terms of `P(I_t = 1 | L_1)`; fitted with the propensity link.
    pub participation_terms: Vec<Term>,
    /// Baseline terms of the nested regression used by baseline-adjusted G-computation.
    pub baseline_terms: Vec<Term>,
}

impl WorkingModels {
    /// Propensity and outcome models on every covariate plus the lagged
    /// outcome; baseline models on every baseline covariate. Logistic
    /// propensity, linear outcome (logistic for binary outcomes).
    pub fn default_for(ds: &PanelDataset) -> Self {
        let k = ds.covariate_names().len();
        let mut current: Vec<Term> = (0..k).map(Term::Covariate).collect();
        current.push(Term::LaggedOutcome);
        let baseline: Vec<Term> = (0..k).map(Term::Baseline).collect();
        WorkingModels {
            propensity_terms: current.clone(),
            propensity_link: Link::Logit,
            outcome_terms: current,
            outcome_link: match ds.outcome_family() {
                OutcomeFamily::Continuous => Link::Identity,
                OutcomeFamily::Binary => Link::Logit,
            },
            outcome_structure: OutcomeStructure::ArmSpecific,
            participation_terms: baseline.clone(),
            baseline_terms: baseline,
        }
    }

    /// Same models with both binary-regression links switched to `link`.
    pub fn with_binary_link(mut self, link: Link) -> Self {
        self.propensity_link = link;
        if self.outcome_link != Link::Identity {
            self.outcome_link = link;
        }
        self
    }
}

/// Outcome regression(s) of one trial.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeModels {
    ArmSpecific { treated: FittedModel, control: FittedModel },
    Joint(FittedModel),
}

impl OutcomeModels {
    pub fn for_arm(&self, treated: bool) -> &FittedModel {
        match self {
            OutcomeModels::ArmSpecific { treated: m, .. } if treated => m,
            OutcomeModels::ArmSpecific { control, .. } => control,
            OutcomeModels::Joint(m) => m,
        }
    }
}

/// Participation model of one trial.
#[derive(Debug, Clone, PartialEq)]
pub enum Participation {
    /// Every patient at risk is eligible: `P(I_t = 1 | L_1) = 1`.
    Certain,
    /// Binary regression of `I_t` (0 for patients no longer observed) on
    /// baseline terms, one row per patient, fitted on first rows.
    Model(FittedModel),
}

/// Which nuisance components to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Needs {
    pub propensity: bool,
    pub outcome: bool,
    pub participation: bool,
    pub baseline_regression: bool,
}

impl Needs {
    pub fn for_estimator(estimand: Estimand, method: Method) -> Self {
        let ipw = method == Method::Ipw;
        let b = estimand == Estimand::PsiB;
        Needs { propensity: ipw, outcome: !ipw, participation: ipw && b, baseline_regression: !ipw && b }
    }

    /// Everything applicable to the design.
    pub fn all(design: Design) -> Self {
        let visit = design == Design::VisitTime;
        Needs { propensity: true, outcome: true, participation: visit, baseline_regression: visit }
    }

    pub fn union(self, other: Needs) -> Self {
        Needs {
            propensity: self.propensity || other.propensity,
            outcome: self.outcome || other.outcome,
            participation: self.participation || other.participation,
            baseline_regression: self.baseline_regression || other.baseline_regression,
        }
    }

    fn covers(&self, other: &Needs) -> bool {
        (self.propensity || !other.propensity)
            && (self.outcome || !other.outcome)
            && (self.participation || !other.participation)
            && (self.baseline_regression || !other.baseline_regression)
    }
}

/// Fitted nuisance models. Vectors are indexed by `t − 1`; `None` marks a
/// trial without eligible patients.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSet {
    pub models: WorkingModels,
    pub fitted: Needs,
    pub propensity: Vec<Option<FittedModel>>,
    pub outcome: Vec<Option<OutcomeModels>>,
    /// Sample proportion `P̂(I_t = 1)` of eligible patients among those at risk.
    pub eligibility_marginal: Vec<f64>,
    pub participation: Vec<Participation>,
    /// Nested regressions `[control, treated]` of predicted outcomes on baseline terms.
    pub baseline_regression: Vec<Option<[FittedModel; 2]>>,
}

fn positivity(assumption: Assumption, detail: alloc::string::String) -> Error {
    Error::Positivity { assumption, detail }
}

/// Fits the working models required by `needs`.
pub fn fit_nuisance(ds: &PanelDataset, models: &WorkingModels, needs: Needs) -> Result<NuisanceSet> {
    let tau = ds.tau();
    let table = crate::panel::emulate_trials(ds);
    let eligibility_marginal = table.trials.iter().map(|t| t.eligible_fraction()).collect();

    let mut propensity = vec![None; tau as usize];
    let mut outcome = vec![None; tau as usize];
    for trial in &table.trials {
        if trial.rows.is_empty() {
            continue;
        }
        let t = trial.t;
        let idx = (t - 1) as usize;
        if (needs.propensity || needs.outcome) && (trial.n_treated == 0 || trial.n_control == 0) {
            let arm = if trial.n_treated == 0 { "treated" } else { "untreated" };
            return Err(positivity(
                Assumption::TreatmentPositivity,
                format!("no {arm} eligible patients in trial t={t}"),
            ));
        }
        if needs.propensity {
            let spec = ModelSpec {
                response: Response::Treatment,
                intercept: true,
                terms: models.propensity_terms.clone(),
                link: models.propensity_link,
                filter: RowFilter::eligible_at(t),
            }
            .without_zero_terms(ds);
            propensity[idx] = Some(glm::fit(&spec, ds).map_err(|e| treatment_fit_error(e, t))?);
        }
        if needs.outcome || needs.baseline_regression {
            let spec = |filter: RowFilter, extra: Option<Term>| {
                let mut terms = models.outcome_terms.clone();
                terms.extend(extra);
                ModelSpec { response: Response::Outcome, intercept: true, terms, link: models.outcome_link, filter }
                    .without_zero_terms(ds)
            };
            outcome[idx] = Some(match models.outcome_structure {
                OutcomeStructure::ArmSpecific => OutcomeModels::ArmSpecific {
                    treated: glm::fit(&spec(RowFilter::arm_at(t, true), None), ds)?,
                    control: glm::fit(&spec(RowFilter::arm_at(t, false), None), ds)?,
                },
                OutcomeStructure::Joint => {
                    let mut s = spec(RowFilter::eligible_at(t), None);
                    if !s.terms.contains(&Term::Treatment) {
                        s.terms.push(Term::Treatment);
                    }
                    OutcomeModels::Joint(glm::fit(&s, ds)?)
                }
            });
        }
    }

    let mut participation = Vec::new();
    let mut baseline_regression = Vec::new();
    if needs.participation || needs.baseline_regression {
        if ds.design() != Design::VisitTime {
            return Err(baseline_undefined());
        }
        if needs.participation {
            participation = fit_participation(ds, models)?;
        }
        if needs.baseline_regression {
            baseline_regression = fit_baseline_regression(ds, models, &outcome)?;
        }
    }

    Ok(NuisanceSet {
        models: models.clone(),
        fitted: needs,
        propensity,
        outcome,
        eligibility_marginal,
        participation,
        baseline_regression,
    })
}

fn treatment_fit_error(e: Error, t: u32) -> Error {
    match e {
        Error::Separation => positivity(
            Assumption::TreatmentPositivity,
            format!("propensity model separates treated and untreated patients in trial t={t}"),
        ),
        other => other,
    }
}

pub fn baseline_undefined() -> Error {
    Error::Undefined("the baseline-adjusted effect needs a visit-time design (newly eligible patients in calendar-time data lack baseline covariates)".into())
}

/// First row of every patient.
pub(crate) fn baseline_rows(ds: &PanelDataset) -> Vec<usize> {
    ds.clusters().iter().map(|r| r.start).collect()
}

/// `I_{c,t}` per patient, 0 when the patient is not observed at `t`.
pub(crate) fn eligible_by_patient(ds: &PanelDataset, t: u32) -> Vec<bool> {
    let obs = ds.observations();
    ds.clusters()
        .iter()
        .map(|r| obs[r.clone()].iter().any(|o| o.t == t && o.eligible))
        .collect()
}

fn fit_participation(ds: &PanelDataset, models: &WorkingModels) -> Result<Vec<Participation>> {
    let base = baseline_rows(ds);
    let obs = ds.observations();
    let spec = ModelSpec {
        response: Response::Eligible,
        intercept: true,
        terms: models.participation_terms.clone(),
        link: models.propensity_link,
        filter: RowFilter { t: Some(1), eligible_only: false, arm: None },
    };
    let p = spec.n_coefficients();
    let mut x = Vec::with_capacity(base.len() * p);
    let mut buf = Vec::new();
    for &i in &base {
        spec.design_row(&obs[i], &[], &mut buf);
        x.extend_from_slice(&buf);
    }
    let mut out = Vec::new();
    for t in 1..=ds.tau() {
        let elig = eligible_by_patient(ds, t);
        let n_elig = elig.iter().filter(|&&e| e).count();
        if n_elig == elig.len() {
            out.push(Participation::Certain);
            continue;
        }
        if n_elig == 0 {
            return Err(positivity(
                Assumption::ParticipationPositivity,
                format!("no patient is eligible for trial t={t}"),
            ));
        }
        let y: Vec<f64> = elig.iter().map(|&e| f64::from(u8::from(e))).collect();
        let fit = glm::fit_design(&x, &y, p, spec.link).map_err(|e| match e {
            Error::Separation => positivity(
                Assumption::ParticipationPositivity,
                format!("participation in trial t={t} is deterministic given baseline covariates"),
            ),
            other => other,
        })?;
        out.push(Participation::Model(FittedModel {
            spec: spec.clone(),
            coefficients: fit.coefficients,
            converged: true,
            iterations: fit.iterations,
            n_used: base.len(),
        }));
    }
    Ok(out)
}

fn fit_baseline_regression(
    ds: &PanelDataset,
    models: &WorkingModels,
    outcome: &[Option<OutcomeModels>],
) -> Result<Vec<Option<[FittedModel; 2]>>> {
    let obs = ds.observations();
    let mut out = Vec::new();
    for t in 1..=ds.tau() {
        let Some(om) = &outcome[(t - 1) as usize] else {
            out.push(None);
            continue;
        };
        let filter = RowFilter::eligible_at(t);
        let rows = filter.rows(ds);
        let spec = ModelSpec {
            response: Response::Outcome,
            intercept: true,
            terms: models.baseline_terms.clone(),
            link: Link::Identity,
            filter,
        }
        .without_zero_terms(ds);
        let p = spec.n_coefficients();
        let mut x = Vec::with_capacity(rows.len() * p);
        let mut buf = Vec::new();
        for &i in &rows {
            spec.design_row(&obs[i], &[], &mut buf);
            x.extend_from_slice(&buf);
        }
        let fit_arm = |treated: bool| -> Result<FittedModel> {
            let a = f64::from(u8::from(treated));
            let y = glm::predict_mean(om.for_arm(treated), ds, &rows, &[("treat", a)])?;
            let f = glm::fit_design(&x, &y, p, Link::Identity)?;
            Ok(FittedModel {
                spec: spec.clone(),
                coefficients: f.coefficients,
                converged: true,
                iterations: f.iterations,
                n_used: rows.len(),
            })
        };
        out.push(Some([fit_arm(false)?, fit_arm(true)?]));
    }
    Ok(out)
}

/// Nuisance quantities evaluated on the data; the only input of the plug-in formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceValues {
    /// `P̂(A_t = 1 | W̄_t, I_t = 1)` per row (NaN on ineligible rows or when not fitted).
    pub propensity: Vec<f64>,
    /// Predicted outcome under treatment, per row (NaN where not fitted).
    pub mu1: Vec<f64>,
    /// Predicted outcome under control, per row.
    pub mu0: Vec<f64>,
    /// `P̂(I_t = 1)` per trial.
    pub eligibility_marginal: Vec<f64>,
    /// `P̂(I_t = 1 | L_1)` of the row's patient at the row's trial.
    pub participation: Vec<f64>,
    /// Nested-regression predictions `[t − 1][patient]` under treatment.
    pub baseline_mu1: Vec<Vec<f64>>,
    /// Nested-regression predictions `[t − 1][patient]` under control.
    pub baseline_mu0: Vec<Vec<f64>>,
}

/// Evaluates the fitted nuisance models on every row.
pub fn nuisance_values(ds: &PanelDataset, nuis: &NuisanceSet) -> Result<NuisanceValues> {
    let obs = ds.observations();
    let n = obs.len();
    let mut propensity = vec![f64::NAN; n];
    let mut mu1 = vec![f64::NAN; n];
    let mut mu0 = vec![f64::NAN; n];
    let mut participation = vec![f64::NAN; n];
    for t in 1..=ds.tau() {
        let idx = (t - 1) as usize;
        let rows = RowFilter::eligible_at(t).rows(ds);
        if let Some(m) = &nuis.propensity[idx] {
            for (&i, p) in rows.iter().zip(glm::predict_mean(m, ds, &rows, &[])?) {
                propensity[i] = p;
            }
        }
        if let Some(om) = &nuis.outcome[idx] {
            let m1 = glm::predict_mean(om.for_arm(true), ds, &rows, &[("treat", 1.0)])?;
            let m0 = glm::predict_mean(om.for_arm(false), ds, &rows, &[("treat", 0.0)])?;
            for (k, &i) in rows.iter().enumerate() {
                mu1[i] = m1[k];
                mu0[i] = m0[k];
            }
        }
    }
    let base = baseline_rows(ds);
    if !nuis.participation.is_empty() {
        for (c, range) in ds.clusters().iter().enumerate() {
            for i in range.clone() {
                participation[i] = match &nuis.participation[(obs[i].t - 1) as usize] {
                    Participation::Certain => 1.0,
                    Participation::Model(m) => glm::predict_mean(m, ds, &[base[c]], &[])?[0],
                };
            }
        }
    }
    let mut baseline_mu1 = Vec::new();
    let mut baseline_mu0 = Vec::new();
    for reg in &nuis.baseline_regression {
        match reg {
            Some([m0, m1]) => {
                baseline_mu0.push(glm::predict_mean(m0, ds, &base, &[])?);
                baseline_mu1.push(glm::predict_mean(m1, ds, &base, &[])?);
            }
            None => {
                baseline_mu0.push(Vec::new());
                baseline_mu1.push(Vec::new());
            }
        }
    }
    Ok(NuisanceValues {
        propensity,
        mu1,
        mu0,
        eligibility_marginal: nuis.eligibility_marginal.clone(),
        participation,
        baseline_mu1,
        baseline_mu0,
    })
}

/// Caps weights above the nearest-rank `percentile` at that value.
pub fn truncate_weights(weights: &[f64], percentile: f64) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Invalid("weights must be non-negative".into()));
    }
    let cap = nearest_rank(weights, percentile)
        .ok_or_else(|| Error::Invalid("truncation needs a non-empty weight vector and percentile in (0, 100]".into()))?;
    Ok(weights.iter().map(|&w| w.min(cap)).collect())
}

/// Estimation options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub scale: Scale,
    /// Percentile at which IPW weights are truncated; `None` keeps them as is.
    pub truncation: Option<f64>,
    pub level: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options { scale: Scale::RiskDifference, truncation: None, level: 0.95 }
    }
}

/// Point estimate with sandwich standard error for one estimator.
///
/// The point estimate comes from the plug-in formulas; the covariance
/// from the stacked system evaluated at the fitted nuisance parameters.
pub fn estimate(
    ds: &PanelDataset,
    nuis: &NuisanceSet,
    estimand: Estimand,
    method: Method,
    opts: Options,
) -> Result<EstimateReport> {
    if !nuis.fitted.covers(&Needs::for_estimator(estimand, method)) {
        return Err(Error::Invalid("nuisance set lacks models required by this estimator".into()));
    }
    if estimand == Estimand::PsiB && ds.design() != Design::VisitTime {
        return Err(baseline_undefined());
    }
    if opts.scale == Scale::LogOdds && ds.outcome_family() != OutcomeFamily::Binary {
        return Err(Error::Invalid("the log-odds scale needs a binary outcome".into()));
    }
    let truncation = if method == Method::Ipw { opts.truncation } else { None };
    let values = nuisance_values(ds, nuis)?;
    let means = plugin::arm_means(ds, &values, estimand, method, truncation)?;
    let system = stack::StackedEstimator::new(ds, nuis, estimand, method, means.cap)?;
    let theta = system.theta_at(nuis, &values, &means)?;
    let (i1, i0) = system.arm_mean_indices();
    let checked = EstimatingSystem::new(system, theta)?;
    let vcov = checked.covariance()?;
    let v2 = nalgebra::DMatrix::from_row_slice(2, 2, &[vcov[(i1, i1)], vcov[(i1, i0)], vcov[(i0, i1)], vcov[(i0, i0)]]);
    let (m1, m0) = (means.treated, means.control);
    let (point, grad) = match opts.scale {
        Scale::RiskDifference => (m1 - m0, [1.0, -1.0]),
        Scale::LogOdds => {
            if !(m1 > 0.0 && m1 < 1.0 && m0 > 0.0 && m0 < 1.0) {
                return Err(Error::Undefined(format!(
                    "log-odds contrast needs arm means in (0, 1), got ({m1}, {m0})"
                )));
            }
            (logit(m1) - logit(m0), [1.0 / (m1 * (1.0 - m1)), -1.0 / (m0 * (1.0 - m0))])
        }
    };
    let se = delta_method(&grad, &v2)?;
    let mut report = EstimateReport::new(estimand.into(), method.into(), opts.scale, point, se, opts.level);
    report.truncation_percentile = truncation;
    report.arm_means = Some((m1, m0));
    Ok(report)
}

/// Uniform effect: trials weighted equally.
pub fn estimate_psi_u(ds: &PanelDataset, nuis: &NuisanceSet, method: Method) -> Result<EstimateReport> {
    estimate(ds, nuis, Estimand::PsiU, method, Options::default())
}

/// Eligibility-weighted effect: trials weighted by their eligible fraction.
pub fn estimate_psi_e(ds: &PanelDataset, nuis: &NuisanceSet, method: Method) -> Result<EstimateReport> {
    estimate(ds, nuis, Estimand::PsiE, method, Options::default())
}

/// Baseline-adjusted effect: trial contrasts standardized to the baseline population.
pub fn estimate_psi_b(ds: &PanelDataset, nuis: &NuisanceSet, method: Method) -> Result<EstimateReport> {
    estimate(ds, nuis, Estimand::PsiB, method, Options::default())
}

/// Log-odds contrast `logit(M1) − logit(M0)` of the arm means.
pub fn estimate_odds_scale(
    ds: &PanelDataset,
    nuis: &NuisanceSet,
    estimand: Estimand,
    method: Method,
) -> Result<EstimateReport> {
    estimate(ds, nuis, estimand, method, Options { scale: Scale::LogOdds, ..Options::default() })
}

/// Fits the default working models and runs one estimator.
pub fn estimate_default(ds: &PanelDataset, estimand: Estimand, method: Method, opts: Options) -> Result<EstimateReport> {
    let models = WorkingModels::default_for(ds);
    let nuis = fit_nuisance(ds, &models, Needs::for_estimator(estimand, method))?;
    estimate(ds, &nuis, estimand, method, opts)
}
