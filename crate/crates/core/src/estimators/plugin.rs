//! Literal evaluation of the estimators from supplied nuisance values.
//!
//! With `N_t` patients at risk of trial `t`, `n_t` of them eligible,
//! `p_t = n_t / N_t`, `S = Σ_t p_t`, `m` patients and propensity `π`:
//!
//! ```text
//! ψ_u:  M_a = (1/τ) Σ_t (1/N_t) Σ_{I_t=1} h_a / p_t
//! ψ_e:  M_a =       Σ_t (1/N_t) Σ_{I_t=1} h_a / S
//! ψ_b:  M_a = (1/τ) Σ_t (1/m)   Σ_{I_t=1} h_a / P(I_t=1 | L_1)      (IPW)
//!       M_a = (1/τ) Σ_t (1/m)   Σ_{patients} Ê{μ_a | L_1, I_t=1}      (G-computation)
//! ```
//!
//! where `h_1 = A·Y/π`, `h_0 = (1−A)·Y/(1−π)` for IPW and `h_a = μ_a` for
//! G-computation. In visit-time data `N_t = m` and these are the textbook
//! `1/n` forms.

use alloc::format;
use alloc::vec::Vec;

use super::{Estimand, Method, NuisanceValues};
use crate::error::{Assumption, Error, Result};
use crate::math::nearest_rank;
use crate::panel::PanelDataset;

/// Counterfactual arm means and the weight cap applied, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmMeans {
    pub treated: f64,
    pub control: f64,
    pub cap: Option<f64>,
}

impl ArmMeans {
    pub fn difference(&self) -> f64 {
        self.treated - self.control
    }
}

/// Per-trial counts behind the eligibility weights.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TrialCounts {
    pub at_risk: Vec<usize>,
    pub eligible: Vec<usize>,
}

pub(crate) fn trial_counts(ds: &PanelDataset) -> TrialCounts {
    let tau = ds.tau() as usize;
    let mut eligible = alloc::vec![0; tau];
    for o in ds.observations() {
        if o.eligible {
            eligible[(o.t - 1) as usize] += 1;
        }
    }
    let at_risk = (1..=ds.tau()).map(|t| ds.at_risk(t)).collect();
    TrialCounts { at_risk, eligible }
}

pub(crate) fn check_eligibility(estimand: Estimand, p: &[f64]) -> Result<()> {
    match estimand {
        Estimand::PsiU => {
            if let Some(t) = p.iter().position(|&x| !(x > 0.0)) {
                return Err(Error::Positivity {
                    assumption: Assumption::EligibilityPositivity,
                    detail: format!("trial t={} has no eligible patients", t + 1),
                });
            }
        }
        Estimand::PsiE => {
            if !p.iter().any(|&x| x > 0.0) {
                return Err(Error::Positivity {
                    assumption: Assumption::EligibilityPositivity,
                    detail: "no trial has eligible patients".into(),
                });
            }
        }
        Estimand::PsiB => {
            if let Some(t) = p.iter().position(|&x| !(x > 0.0)) {
                return Err(Error::Positivity {
                    assumption: Assumption::ParticipationPositivity,
                    detail: format!("trial t={} has no eligible patients", t + 1),
                });
            }
        }
    }
    Ok(())
}

/// Inverse probability of receiving the observed arm.
pub(crate) fn check_propensity(p: f64, patient: &str, t: u32) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Positivity {
            assumption: Assumption::TreatmentPositivity,
            detail: format!("fitted propensity {p} for patient `{patient}` at t={t}"),
        })
    }
}

pub(crate) fn check_participation(q: f64, patient: &str, t: u32) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::Positivity {
            assumption: Assumption::ParticipationPositivity,
            detail: format!("fitted participation probability {q} for patient `{patient}` at t={t}"),
        })
    }
}

/// Combined inverse weights `1 / (eligibility term × P(observed arm))` on
/// eligible rows, as `(row, weight)` pairs.
pub fn ipw_weights(ds: &PanelDataset, v: &NuisanceValues, estimand: Estimand) -> Result<Vec<(usize, f64)>> {
    let p = &v.eligibility_marginal;
    check_eligibility(estimand, p)?;
    let s: f64 = p.iter().sum();
    let mut out = Vec::new();
    for (i, o) in ds.observations().iter().enumerate() {
        if !o.eligible {
            continue;
        }
        let pi = v.propensity[i];
        check_propensity(pi, &o.patient_id, o.t)?;
        let arm = if o.treated { pi } else { 1.0 - pi };
        let elig = match estimand {
            Estimand::PsiU => p[(o.t - 1) as usize],
            Estimand::PsiE => s,
            Estimand::PsiB => {
                let q = v.participation[i];
                check_participation(q, &o.patient_id, o.t)?;
                q
            }
        };
        out.push((i, 1.0 / (elig * arm)));
    }
    Ok(out)
}

/// Arm means of one estimator. `truncation` caps IPW weights at the given
/// nearest-rank percentile of the pooled eligible-row weights.
pub fn arm_means(
    ds: &PanelDataset,
    v: &NuisanceValues,
    estimand: Estimand,
    method: Method,
    truncation: Option<f64>,
) -> Result<ArmMeans> {
    let counts = trial_counts(ds);
    let tau = f64::from(ds.tau());
    let m = ds.n_clusters() as f64;
    let p = &v.eligibility_marginal;
    check_eligibility(estimand, p)?;
    let s: f64 = p.iter().sum();
    let obs = ds.observations();
    // Per-trial scale of a row's contribution.
    let k = |t: u32| -> f64 {
        let n_t = counts.at_risk[(t - 1) as usize] as f64;
        match estimand {
            Estimand::PsiU => 1.0 / (tau * n_t),
            Estimand::PsiE => 1.0 / n_t,
            Estimand::PsiB => 1.0 / (tau * m),
        }
    };
    let (mut m1, mut m0) = (0.0, 0.0);
    let mut cap = None;
    match method {
        Method::Ipw => {
            let w = ipw_weights(ds, v, estimand)?;
            if let Some(pct) = truncation {
                let raw: Vec<f64> = w.iter().map(|x| x.1).collect();
                cap = Some(nearest_rank(&raw, pct).ok_or_else(|| {
                    Error::Invalid("truncation percentile must lie in (0, 100]".into())
                })?);
            }
            for (i, wi) in w {
                let o = &obs[i];
                let wi = cap.map_or(wi, |c| wi.min(c));
                let term = k(o.t) * o.outcome * wi;
                if o.treated {
                    m1 += term;
                } else {
                    m0 += term;
                }
            }
        }
        Method::Gcomp if estimand == Estimand::PsiB => {
            for t in 0..ds.tau() as usize {
                if v.baseline_mu1[t].len() != ds.n_clusters() {
                    return Err(Error::Invalid(format!("nested regression missing for trial t={}", t + 1)));
                }
                m1 += v.baseline_mu1[t].iter().sum::<f64>() / (tau * m);
                m0 += v.baseline_mu0[t].iter().sum::<f64>() / (tau * m);
            }
        }
        Method::Gcomp => {
            for (i, o) in obs.iter().enumerate() {
                if !o.eligible {
                    continue;
                }
                let elig = match estimand {
                    Estimand::PsiU => p[(o.t - 1) as usize],
                    _ => s,
                };
                let c = k(o.t) / elig;
                m1 += c * v.mu1[i];
                m0 += c * v.mu0[i];
            }
        }
    }
    if !(m1.is_finite() && m0.is_finite()) {
        return Err(Error::Numerical("non-finite arm mean (missing nuisance values?)".into()));
    }
    Ok(ArmMeans { treated: m1, control: m0, cap })
}

/// Per-trial contrasts `θ̂_t = (1/n_t) Σ_{I_t=1} (h_1 − h_0)`; `None` for empty trials.
pub fn trial_contrasts(ds: &PanelDataset, v: &NuisanceValues, method: Method) -> Result<Vec<Option<f64>>> {
    let counts = trial_counts(ds);
    let mut sums = alloc::vec![0.0; ds.tau() as usize];
    for (i, o) in ds.observations().iter().enumerate() {
        if !o.eligible {
            continue;
        }
        let h = match method {
            Method::Ipw => {
                let pi = v.propensity[i];
                check_propensity(pi, &o.patient_id, o.t)?;
                if o.treated { o.outcome / pi } else { -o.outcome / (1.0 - pi) }
            }
            Method::Gcomp => v.mu1[i] - v.mu0[i],
        };
        sums[(o.t - 1) as usize] += h;
    }
    Ok(sums
        .iter()
        .zip(&counts.eligible)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect())
}
