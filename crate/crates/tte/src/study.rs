//! Estimator sets and targets for simulation studies.

use tte_core::comparators::{g_population_limit, ols_population_limit};
use tte_core::estimators::{Estimand, Method};
use tte_core::glm::Link;
use tte_core::panel::Design;
use tte_core::simgen::{
    estimand_limit_oracle, probit_frailty_psi_b_limit, DgpFamily, DgpSpec, EffectSchedule, EstimatorKind,
    OracleLimit, Study, StudyEstimator,
};

use crate::io::LimitRecord;
use crate::Error;

pub const DEFAULT_MC_N: usize = 2_000_000;

/// Population value of an estimand.
///
/// Continuous outcomes have the same conditional effect for every history
/// at a given visit, so `ψ_u` and `ψ_b` equal the average of the effect
/// schedule and are exact. So is `ψ_e` under a constant effect, and `ψ_b`
/// of the probit-frailty process, which has a closed form. Everything else
/// comes from a Monte Carlo draw of `mc_n` patients.
pub fn estimand_target(dgp: &DgpSpec, estimand: Estimand, mc_n: usize, seed: u64) -> Result<OracleLimit, Error> {
    let exact = |limit| OracleLimit { limit, mc_se: 0.0, mc_n: 0, seed };
    if dgp.outcome_family == DgpFamily::Continuous {
        let schedule_mean =
            (1..=dgp.tau).map(|t| dgp.effect_schedule.multiplier(t)).sum::<f64>() / f64::from(dgp.tau);
        let constant = dgp.effect_schedule == EffectSchedule::Constant;
        if estimand != Estimand::PsiE || constant {
            if estimand == Estimand::PsiB && dgp.design != Design::VisitTime {
                return Err(tte_core::estimators::baseline_undefined().into());
            }
            return Ok(exact(dgp.gamma.treatment * schedule_mean));
        }
    }
    if dgp.outcome_family == DgpFamily::BinaryProbitFrailty && estimand == Estimand::PsiB && dgp.tau <= 2 {
        return Ok(exact(probit_frailty_psi_b_limit(dgp)?));
    }
    Ok(estimand_limit_oracle(dgp, estimand, mc_n, seed)?)
}

fn proposed(estimand: Estimand, method: Method, target: f64) -> StudyEstimator {
    StudyEstimator::new(EstimatorKind::Proposed { estimand, method }, target)
}

/// Estimators applicable to the design, with their targets.
///
/// Calendar time: `ψ_u` and `ψ_e`; visit time: `ψ_b`; each by IPW and
/// G-computation. Continuous outcomes add pooled OLS, scored against every
/// estimand of the design. The probit-frailty process runs each proposed
/// estimator with both logit and probit nuisance links.
pub fn design_study(dgp: &DgpSpec, reps: usize, n: usize, seed: u64, mc_n: usize) -> Result<Study, Error> {
    dgp.validate()?;
    let estimands: &[Estimand] = match dgp.design {
        Design::CalendarTime => &[Estimand::PsiU, Estimand::PsiE],
        Design::VisitTime => &[Estimand::PsiB],
    };
    let links: &[Link] = match dgp.outcome_family {
        DgpFamily::BinaryProbitFrailty => &[Link::Logit, Link::Probit],
        _ => &[Link::Logit],
    };
    let targets = estimands
        .iter()
        .map(|&e| estimand_target(dgp, e, mc_n, seed).map(|l| (e, l.limit)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut estimators = Vec::new();
    for &(e, target) in &targets {
        for method in [Method::Ipw, Method::Gcomp] {
            for &link in links {
                let mut s = proposed(e, method, target);
                s.link = link;
                if links.len() > 1 {
                    s.label = format!("{}-{}", s.label, crate::io::variant_name(&link));
                }
                estimators.push(s);
            }
        }
    }
    if dgp.outcome_family == DgpFamily::Continuous {
        for &(e, target) in &targets {
            let mut s = StudyEstimator::new(EstimatorKind::PooledOls, target);
            s.label = format!("pooled_ols-{}", crate::io::variant_name(&e));
            s.reference = Some(e);
            estimators.push(s);
        }
    }
    Ok(Study { dgp: dgp.clone(), estimators, reps, n, master_seed: seed })
}

/// Monte Carlo limits of the estimands applicable to the design and of the
/// pooled OLS and g-estimator coefficients.
pub fn population_limits(dgp: &DgpSpec, mc_n: usize, seed: u64) -> Result<Vec<LimitRecord>, Error> {
    let mut out = Vec::new();
    let estimands: &[Estimand] = match dgp.design {
        Design::CalendarTime => &[Estimand::PsiU, Estimand::PsiE],
        Design::VisitTime => &[Estimand::PsiU, Estimand::PsiE, Estimand::PsiB],
    };
    for &e in estimands {
        out.push(LimitRecord::new(&crate::io::variant_name(&e), &estimand_limit_oracle(dgp, e, mc_n, seed)?));
    }
    out.push(LimitRecord::new("pooled_ols", &ols_population_limit(dgp, mc_n, seed)?));
    out.push(LimitRecord::new("g_estimator", &g_population_limit(dgp, mc_n, seed)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_sets_follow_design() {
        let s = design_study(&DgpSpec::setting1(Design::CalendarTime), 1, 10, 1, 100_000).unwrap();
        let labels: Vec<&str> = s.estimators.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(
            labels,
            ["psi_u-ipw", "psi_u-gcomp", "psi_e-ipw", "psi_e-gcomp", "pooled_ols-psi_u", "pooled_ols-psi_e"]
        );
        assert!(s.estimators.iter().all(|e| e.target == 1.0));

        let s = design_study(&DgpSpec::binary_probit_frailty(), 1, 10, 1, 100_000).unwrap();
        let labels: Vec<&str> = s.estimators.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, ["psi_b-ipw-logit", "psi_b-ipw-probit", "psi_b-gcomp-logit", "psi_b-gcomp-probit"]);
    }

    #[test]
    fn exact_targets() {
        let dgp = DgpSpec::setting2(Design::VisitTime);
        assert_eq!(estimand_target(&dgp, Estimand::PsiU, 0, 0).unwrap().limit, 1.5);
        assert_eq!(estimand_target(&dgp, Estimand::PsiB, 0, 0).unwrap().limit, 1.5);
        let psi_b = estimand_target(&dgp, Estimand::PsiB, 0, 0).unwrap();
        let mc = estimand_limit_oracle(&dgp, Estimand::PsiB, 400_000, 5).unwrap();
        assert!((mc.limit - psi_b.limit).abs() < 4.0 * mc.mc_se, "{mc:?}");
        assert!(estimand_target(&DgpSpec::setting2(Design::CalendarTime), Estimand::PsiB, 0, 0).is_err());
    }
}
