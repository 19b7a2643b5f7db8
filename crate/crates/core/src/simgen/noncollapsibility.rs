use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::stream_rng;
use crate::error::{invalid, Result};
use crate::glm::{self, Link};
use crate::math::{expit, logit, normal_expectation};
use crate::panel::{Design, OutcomeFamily, PanelDataset, RawRecord};

const TIME_POINTS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NcFamily {
    Binary,
    Continuous,
}

/// Five-visit process without confounding in which the spread of `L_t`
/// among the untreated shrinks as `1/t`:
/// `L_t ~ N(0, A_{t−1} + (1 − A_{t−1})/t)`, `A_t` absorbing with
/// initiation probability 0.2, `Y_t ~ Bernoulli(expit(A_t + L_t))` or
/// `N(A_t + L_t, 1)`.
pub fn noncollapsibility_dgp(n: usize, seed: u64, family: NcFamily) -> Result<PanelDataset> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let width = format!("{}", n - 1).len();
    let mut records = Vec::with_capacity(n * TIME_POINTS as usize);
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        let id = format!("p{i:0width$}");
        let mut a_prev = false;
        for t in 1..=TIME_POINTS {
            let var = if a_prev { 1.0 } else { 1.0 / f64::from(t) };
            let z: f64 = rng.sample(StandardNormal);
            let l = libm::sqrt(var) * z;
            let treated = a_prev || rng.random::<f64>() < 0.2;
            let eta = f64::from(u8::from(treated)) + l;
            let y = match family {
                NcFamily::Binary => f64::from(u8::from(rng.random::<f64>() < expit(eta))),
                NcFamily::Continuous => eta + rng.sample::<f64, _>(StandardNormal),
            };
            records.push(RawRecord {
                patient_id: id.clone(),
                t,
                eligible: Some(!a_prev),
                treated,
                covariates: vec![l],
                outcome: y,
            });
            a_prev = treated;
        }
    }
    let fam = match family {
        NcFamily::Binary => OutcomeFamily::Binary,
        NcFamily::Continuous => OutcomeFamily::Continuous,
    };
    PanelDataset::new(vec!["L".into()], records, Design::VisitTime, Some(fam))
}

/// Marginal log-odds ratio of `expit(A + L)` with `L ~ N(0, variance)`.
pub fn marginal_logodds(variance: f64) -> f64 {
    let sd = libm::sqrt(variance);
    let p1 = normal_expectation(0.0, sd, 64, |l| expit(1.0 + l));
    let p0 = normal_expectation(0.0, sd, 64, expit);
    logit(p1) - logit(p0)
}

/// Marginal log-odds ratio among the untreated at visit `t` (`Var L_t = 1/t`).
pub fn marginal_logodds_oracle(t: u32) -> f64 {
    marginal_logodds(1.0 / f64::from(t.max(1)))
}

/// Per-trial marginal treatment coefficient among eligible rows: logistic
/// regression of `Y` on `A` for binary outcomes, least squares otherwise.
pub fn per_trial_marginal_effects(ds: &PanelDataset) -> Result<Vec<f64>> {
    let link = match ds.outcome_family() {
        OutcomeFamily::Binary => Link::Logit,
        OutcomeFamily::Continuous => Link::Identity,
    };
    (1..=ds.tau())
        .map(|t| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for o in ds.observations().iter().filter(|o| o.t == t && o.eligible) {
                x.extend_from_slice(&[1.0, f64::from(u8::from(o.treated))]);
                y.push(o.outcome);
            }
            Ok(glm::fit_design(&x, &y, 2, link)?.coefficients[1])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn oracle_limits_and_monotone() {
        assert!((marginal_logodds(0.0) - 1.0).abs() < 1e-12);
        let v: Vec<f64> = (1..=5).map(marginal_logodds_oracle).collect();
        assert!(v[0] < 1.0);
        assert!(v.windows(2).all(|w| w[0] < w[1]), "{v:?}");
    }

    #[test]
    fn oracle_matches_monte_carlo_integration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 10_000_000;
        let (mut s1, mut s0) = (0.0, 0.0);
        for _ in 0..n {
            let l: f64 = rng.sample(StandardNormal);
            s1 += expit(1.0 + l);
            s0 += expit(l);
        }
        let mc = logit(s1 / n as f64) - logit(s0 / n as f64);
        assert!((mc - marginal_logodds_oracle(1)).abs() < 1e-4, "{mc}");
    }

    #[test]
    fn covariate_variance_shrinks() {
        let ds = noncollapsibility_dgp(20_000, 4, NcFamily::Binary).unwrap();
        for t in 1..=5u32 {
            let l: Vec<f64> = ds
                .observations()
                .iter()
                .filter(|o| o.t == t && o.eligible)
                .map(|o| o.covariates[0])
                .collect();
            let var = l.iter().map(|x| x * x).sum::<f64>() / l.len() as f64;
            assert!((var - 1.0 / f64::from(t)).abs() < 0.05 / f64::from(t), "t={t} var={var}");
        }
        let fresh = ds.observations().iter().filter(|o| o.t == 1).filter(|o| o.treated).count();
        assert!((fresh as f64 / 20_000.0 - 0.2).abs() < 0.015);
    }
}
