use alloc::vec;
use alloc::vec::Vec;

use super::{for_each_patient, DgpFamily, DgpSpec};
use crate::error::{invalid, Error, Result};
use crate::estimators::{baseline_undefined, Estimand};
use crate::math::{norm_cdf, normal_expectation};
use crate::panel::Design;

/// Population limit approximated on one large draw.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct OracleLimit {
    pub limit: f64,
    pub mc_se: f64,
    pub mc_n: usize,
    pub seed: u64,
}

pub(crate) const MIN_MC_N: usize = 100_000;

/// Running mean and covariance of per-cluster vectors.
pub(crate) struct Moments {
    n: f64,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl Moments {
    pub fn new(d: usize) -> Self {
        Moments { n: 0.0, sum: vec![0.0; d], outer: vec![0.0; d * d] }
    }

    pub fn push(&mut self, z: &[f64]) {
        let d = self.sum.len();
        self.n += 1.0;
        for i in 0..d {
            self.sum[i] += z[i];
            for j in 0..d {
                self.outer[i * d + j] += z[i] * z[j];
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n).collect()
    }

    /// Standard error of `f(z̄)` by the delta method with a numerical gradient.
    pub fn linearized(&self, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        let d = self.sum.len();
        let mean = self.mean();
        let value = f(&mean);
        let mut grad = vec![0.0; d];
        let mut z = mean.clone();
        for k in 0..d {
            let h = 1e-6 * mean[k].abs().max(1e-3);
            z[k] = mean[k] + h;
            let up = f(&z);
            z[k] = mean[k] - h;
            let down = f(&z);
            z[k] = mean[k];
            grad[k] = (up - down) / (2.0 * h);
        }
        let mut var = 0.0;
        for i in 0..d {
            for j in 0..d {
                let cov = (self.outer[i * d + j] - self.n * mean[i] * mean[j]) / (self.n - 1.0);
                var += grad[i] * cov * grad[j];
            }
        }
        (value, libm::sqrt(var.max(0.0) / self.n))
    }
}

/// Approximates `ψ_u`, `ψ_e` or `ψ_b` from the true conditional effects
/// `E(Y¹_t − Y⁰_t | history)` on a draw of `mc_n` patients (or slots).
///
/// The baseline-adjusted effect weights trial `t` contributions by
/// `1 / P(I_t = 1 | L_1)`. With at most two trials this probability is
/// known exactly (`1` and `1 − π_1(L_1)`); later trials use 100 quantile
/// strata of `L_1`.
pub fn estimand_limit_oracle(dgp: &DgpSpec, estimand: Estimand, mc_n: usize, seed: u64) -> Result<OracleLimit> {
    dgp.validate()?;
    if mc_n < MIN_MC_N {
        return Err(invalid("oracle draws need mc_n >= 100000"));
    }
    let tau = dgp.tau as usize;
    let (limit, mc_se) = match estimand {
        Estimand::PsiU | Estimand::PsiE => {
            // z = (D_t, n_t, N_t): effect sum, eligible count and at-risk count per cluster.
            let mut mom = Moments::new(3 * tau);
            let mut z = vec![0.0; 3 * tau];
            let mut current = usize::MAX;
            for_each_patient(dgp, mc_n, seed, 0, |c, _, rows| {
                if c != current {
                    if current != usize::MAX {
                        mom.push(&z);
                    }
                    z.fill(0.0);
                    current = c;
                }
                for r in rows {
                    let t = (r.t - 1) as usize;
                    z[2 * tau + t] += 1.0;
                    if r.eligible {
                        z[t] += r.mu1 - r.mu0;
                        z[tau + t] += 1.0;
                    }
                }
            });
            mom.push(&z);
            if mom.mean()[tau..2 * tau].iter().any(|&n| n == 0.0) && estimand == Estimand::PsiU {
                return Err(Error::Positivity {
                    assumption: crate::error::Assumption::EligibilityPositivity,
                    detail: "a trial has no eligible patients in the oracle draw".into(),
                });
            }
            let f = |z: &[f64]| -> f64 {
                let (d, n, big_n) = (&z[..tau], &z[tau..2 * tau], &z[2 * tau..]);
                match estimand {
                    Estimand::PsiU => (0..tau).map(|t| d[t] / n[t]).sum::<f64>() / tau as f64,
                    _ => {
                        let num: f64 = (0..tau).map(|t| d[t] / big_n[t]).sum();
                        let den: f64 = (0..tau).map(|t| n[t] / big_n[t]).sum();
                        num / den
                    }
                }
            };
            mom.linearized(f)
        }
        Estimand::PsiB => {
            if dgp.design != Design::VisitTime {
                return Err(baseline_undefined());
            }
            if tau <= 2 {
                let mut mom = Moments::new(1);
                for_each_patient(dgp, mc_n, seed, 0, |_, _, rows| {
                    let l1 = rows[0].l1;
                    let mut z = 0.0;
                    for r in rows.iter().filter(|r| r.eligible) {
                        let q = if r.t == 1 { 1.0 } else { 1.0 - dgp.propensity(l1, 0.0) };
                        z += (r.mu1 - r.mu0) / q;
                    }
                    mom.push(&[z / tau as f64]);
                });
                mom.linearized(|z| z[0])
            } else {
                stratified_psi_b(dgp, mc_n, seed)
            }
        }
    };
    Ok(OracleLimit { limit, mc_se, mc_n, seed })
}

fn stratified_psi_b(dgp: &DgpSpec, mc_n: usize, seed: u64) -> (f64, f64) {
    const STRATA: usize = 100;
    let tau = dgp.tau as usize;
    let mut l1 = Vec::with_capacity(mc_n);
    // Per patient and trial: effect if eligible, NaN otherwise.
    let mut delta = Vec::with_capacity(mc_n * tau);
    for_each_patient(dgp, mc_n, seed, 0, |_, _, rows| {
        l1.push(rows[0].l1);
        let mut d = vec![f64::NAN; tau];
        for r in rows.iter().filter(|r| r.eligible) {
            d[(r.t - 1) as usize] = r.mu1 - r.mu0;
        }
        delta.extend(d);
    });
    let mut order: Vec<usize> = (0..mc_n).collect();
    order.sort_by(|&a, &b| l1[a].total_cmp(&l1[b]));
    let mut stratum = vec![0usize; mc_n];
    for (rank, &i) in order.iter().enumerate() {
        stratum[i] = rank * STRATA / mc_n;
    }
    let mut size = [0.0; STRATA];
    let mut elig = vec![0.0; STRATA * tau];
    for i in 0..mc_n {
        size[stratum[i]] += 1.0;
        for t in 0..tau {
            if !delta[i * tau + t].is_nan() {
                elig[stratum[i] * tau + t] += 1.0;
            }
        }
    }
    let mut mom = Moments::new(1);
    for i in 0..mc_n {
        let s = stratum[i];
        let mut z = 0.0;
        for t in 0..tau {
            let d = delta[i * tau + t];
            if !d.is_nan() {
                z += d * size[s] / elig[s * tau + t];
            }
        }
        mom.push(&[z / tau as f64]);
    }
    mom.linearized(|z| z[0])
}

/// Closed-form baseline-adjusted effect of the probit-frailty process (τ ≤ 2).
///
/// Given `L_1` and `I_2 = 1`, `L_2 ~ N(α0 + α1 L_1, sd²)` and the frailty is
/// still standard normal, so `E(Y^a_t | I_t = 1, L_1)` is a probit in `L_1`
/// with inflated scale. The outer average over `L_1 ~ N(α0, sd²)` uses
/// 64-point Gauss–Hermite quadrature.
pub fn probit_frailty_psi_b_limit(dgp: &DgpSpec) -> Result<f64> {
    if dgp.outcome_family != DgpFamily::BinaryProbitFrailty || dgp.tau > 2 || dgp.design != Design::VisitTime {
        return Err(invalid("closed form needs the visit-time probit-frailty process with tau <= 2"));
    }
    let g = &dgp.gamma;
    let a = &dgp.alpha;
    let sd = dgp.noise_sds[0];
    let contrast = |t: u32, l1: f64| -> f64 {
        let eff = g.treatment * dgp.effect_schedule.multiplier(t);
        let (mean_l, var_l) = if t == 1 { (l1, 0.0) } else { (a.intercept + a.lag_covariate * l1, sd * sd) };
        let scale = libm::sqrt(1.0 + 1.0 + g.covariate * g.covariate * var_l);
        let base = g.intercept + g.covariate * mean_l;
        norm_cdf((base + eff) / scale) - norm_cdf(base / scale)
    };
    let total: f64 = (1..=dgp.tau).map(|t| normal_expectation(a.intercept, sd, 64, |l1| contrast(t, l1))).sum();
    Ok(total / f64::from(dgp.tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting2_uniform_limit_is_one_and_a_half() {
        let o = estimand_limit_oracle(&DgpSpec::setting2(Design::CalendarTime), Estimand::PsiU, 100_000, 1).unwrap();
        assert!((o.limit - 1.5).abs() < 1e-9, "{o:?}");
    }

    #[test]
    fn null_effect_limits_are_zero() {
        let mut dgp = DgpSpec::setting2(Design::VisitTime);
        dgp.gamma.treatment = 0.0;
        for e in [Estimand::PsiU, Estimand::PsiE, Estimand::PsiB] {
            let o = estimand_limit_oracle(&dgp, e, 100_000, 2).unwrap();
            assert!(o.limit.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_small_draws_and_calendar_baseline() {
        let dgp = DgpSpec::setting1(Design::CalendarTime);
        assert!(estimand_limit_oracle(&dgp, Estimand::PsiU, 1000, 1).is_err());
        assert!(matches!(
            estimand_limit_oracle(&dgp, Estimand::PsiB, 100_000, 1),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn frailty_closed_form_matches_draw() {
        let dgp = DgpSpec::binary_probit_frailty();
        let exact = probit_frailty_psi_b_limit(&dgp).unwrap();
        let o = estimand_limit_oracle(&dgp, Estimand::PsiB, 400_000, 3).unwrap();
        assert!((o.limit - exact).abs() < 4.0 * o.mc_se, "{exact} vs {o:?}");
    }
}
