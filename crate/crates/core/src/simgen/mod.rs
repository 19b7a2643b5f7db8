//! Simulation: data-generating processes, counterfactuals, population
//! limits of the estimands and the replication study.
//!
//! Each patient draws from its own ChaCha8 stream keyed by `(seed, stream)`,
//! so datasets do not depend on the order in which patients are generated.

mod noncollapsibility;
pub(crate) mod oracle;
mod replicate;

pub use noncollapsibility::{marginal_logodds_oracle, noncollapsibility_dgp, per_trial_marginal_effects, NcFamily};
pub use oracle::{estimand_limit_oracle, probit_frailty_psi_b_limit, OracleLimit};
pub use replicate::{
    aggregate, replicate_study, replication_seed, run_replication, EstimatorKind, McRow, MonteCarloTable,
    ReplicationOutcome, Study, StudyEstimator,
};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::math::{expit, norm_cdf};
use crate::panel::{Design, OutcomeFamily, PanelDataset, RawRecord};

/// Covariate process `L_t ~ N(α0 + α1 L_{t−1} + α2 A_{t−1}, sd)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Alpha {
    pub intercept: f64,
    pub lag_covariate: f64,
    pub lag_treatment: f64,
}

/// Treatment initiation `P(A_t = 1 | A_{t−1} = 0) = g(β0 + β1 L_t + β2 A_{t−1} + β3 Y_{t−1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Beta {
    pub intercept: f64,
    pub covariate: f64,
    pub lag_treatment: f64,
    pub lag_outcome: f64,
}

/// Outcome `γ0 + γ1 e(t) A_t + γ2 L_t + γ3 Y_{t−1}` with effect schedule `e(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Gamma {
    pub intercept: f64,
    pub treatment: f64,
    pub covariate: f64,
    pub lag_outcome: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EffectSchedule {
    /// `e(t) = 1`.
    Constant,
    /// `e(t) = t`.
    Linear,
}

impl EffectSchedule {
    pub fn multiplier(self, t: u32) -> f64 {
        match self {
            EffectSchedule::Constant => 1.0,
            EffectSchedule::Linear => f64::from(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DgpFamily {
    /// Gaussian outcome, logistic treatment initiation.
    Continuous,
    /// Bernoulli outcome with logistic mean, logistic treatment initiation.
    BinaryLogit,
    /// Bernoulli outcome `Φ(γ0 + γ1 e(t) A + γ2 L + u)` with a standard normal
    /// patient frailty `u` and no lagged-outcome term; probit treatment initiation.
    BinaryProbitFrailty,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DgpSpec {
    pub design: Design,
    pub tau: u32,
    pub alpha: Alpha,
    pub beta: Beta,
    pub gamma: Gamma,
    pub effect_schedule: EffectSchedule,
    pub outcome_family: DgpFamily,
    /// Calendar design: probability that a patient leaves before each visit after entry.
    pub exit_probability: f64,
    /// Standard deviations of the covariate and (continuous) outcome noise.
    pub noise_sds: [f64; 2],
    pub emit_counterfactuals: bool,
}

impl DgpSpec {
    /// Continuous outcome with a constant unit effect.
    pub fn setting1(design: Design) -> Self {
        DgpSpec {
            design,
            tau: 2,
            alpha: Alpha { intercept: 0.0, lag_covariate: 0.5, lag_treatment: 0.3 },
            beta: Beta { intercept: -1.0, covariate: 1.0, lag_treatment: 0.0, lag_outcome: 0.5 },
            gamma: Gamma { intercept: 0.0, treatment: 1.0, covariate: 1.0, lag_outcome: 0.3 },
            effect_schedule: EffectSchedule::Constant,
            outcome_family: DgpFamily::Continuous,
            exit_probability: 0.3,
            noise_sds: [0.2, 0.5],
            emit_counterfactuals: true,
        }
    }

    /// Continuous outcome with effect `t` at trial `t`.
    ///
    /// The visit-time variant raises the initiation intercept to 1 so that
    /// most patients initiate at the first visit and the trials are of very
    /// different sizes.
    pub fn setting2(design: Design) -> Self {
        let mut dgp = DgpSpec { effect_schedule: EffectSchedule::Linear, ..Self::setting1(design) };
        if design == Design::VisitTime {
            dgp.beta.intercept = 1.0;
        }
        dgp
    }

    /// Calendar-time binary outcome with logistic mean and effect `γ1 t`.
    pub fn binary_logit() -> Self {
        DgpSpec {
            gamma: Gamma { intercept: -1.0, treatment: 0.4, covariate: 1.0, lag_outcome: 0.5 },
            outcome_family: DgpFamily::BinaryLogit,
            ..Self::setting2(Design::CalendarTime)
        }
    }

    /// Visit-time binary outcome with probit mean and patient frailty.
    pub fn binary_probit_frailty() -> Self {
        DgpSpec {
            gamma: Gamma { intercept: -0.5, treatment: 0.4, covariate: 1.0, lag_outcome: 0.0 },
            outcome_family: DgpFamily::BinaryProbitFrailty,
            effect_schedule: EffectSchedule::Linear,
            ..Self::setting1(Design::VisitTime)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(invalid("tau must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.exit_probability) {
            return Err(invalid("exit_probability must lie in [0, 1)"));
        }
        if self.noise_sds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("noise standard deviations must be finite and non-negative"));
        }
        let coefs = [
            self.alpha.intercept,
            self.alpha.lag_covariate,
            self.alpha.lag_treatment,
            self.beta.intercept,
            self.beta.covariate,
            self.beta.lag_treatment,
            self.beta.lag_outcome,
            self.gamma.intercept,
            self.gamma.treatment,
            self.gamma.covariate,
            self.gamma.lag_outcome,
        ];
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(invalid("coefficients must be finite"));
        }
        Ok(())
    }

    pub fn panel_family(&self) -> OutcomeFamily {
        match self.outcome_family {
            DgpFamily::Continuous => OutcomeFamily::Continuous,
            _ => OutcomeFamily::Binary,
        }
    }

    /// True initiation probability given the current covariate and lagged outcome.
    pub fn propensity(&self, l: f64, y_lag: f64) -> f64 {
        let b = &self.beta;
        let eta = b.intercept + b.covariate * l + b.lag_outcome * y_lag;
        match self.outcome_family {
            DgpFamily::BinaryProbitFrailty => norm_cdf(eta),
            _ => expit(eta),
        }
    }

    /// Conditional outcome mean under treatment `a` given the history (and frailty).
    pub fn outcome_mean(&self, t: u32, a: f64, l: f64, y_lag: f64, frailty: f64) -> f64 {
        let g = &self.gamma;
        let eff = g.treatment * self.effect_schedule.multiplier(t) * a;
        match self.outcome_family {
            DgpFamily::Continuous => g.intercept + eff + g.covariate * l + g.lag_outcome * y_lag,
            DgpFamily::BinaryLogit => expit(g.intercept + eff + g.covariate * l + g.lag_outcome * y_lag),
            DgpFamily::BinaryProbitFrailty => norm_cdf(g.intercept + eff + g.covariate * l + frailty),
        }
    }
}

/// Truth attached to every generated row, aligned with the dataset rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Counterfactuals {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    /// `E(Y¹_t | history)`, conditional on the frailty where there is one.
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    /// True initiation probability on eligible rows; 1 on rows already treated.
    pub propensity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub dataset: PanelDataset,
    pub counterfactuals: Option<Counterfactuals>,
}

/// One generated person-time row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SimRow {
    pub t: u32,
    pub eligible: bool,
    pub treated: bool,
    pub l: f64,
    pub l1: f64,
    pub y: f64,
    pub y_lag: f64,
    pub y1: f64,
    pub y0: f64,
    pub mu1: f64,
    pub mu0: f64,
    pub propensity: f64,
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulates one patient entering at `t0`; returns the first visit at which
/// the patient is no longer observed (`τ + 1` if never leaving).
pub(crate) fn simulate_patient(dgp: &DgpSpec, rng: &mut ChaCha8Rng, t0: u32, out: &mut Vec<SimRow>) -> u32 {
    let frailty = match dgp.outcome_family {
        DgpFamily::BinaryProbitFrailty => normal(rng),
        _ => 0.0,
    };
    let (mut l_prev, mut a_prev, mut y_prev) = (0.0, false, 0.0);
    let mut l1 = 0.0;
    for t in t0..=dgp.tau {
        if dgp.design == Design::CalendarTime && t > t0 {
            let u: f64 = rng.random();
            if u < dgp.exit_probability {
                return t;
            }
        }
        let a = &dgp.alpha;
        let a_lag = f64::from(u8::from(a_prev));
        let l = a.intercept + a.lag_covariate * l_prev + a.lag_treatment * a_lag + dgp.noise_sds[0] * normal(rng);
        if t == t0 {
            l1 = l;
        }
        let eligible = !a_prev;
        let propensity = if eligible { dgp.propensity(l, y_prev) } else { 1.0 };
        let treated = a_prev || rng.random::<f64>() < propensity;
        let mu1 = dgp.outcome_mean(t, 1.0, l, y_prev, frailty);
        let mu0 = dgp.outcome_mean(t, 0.0, l, y_prev, frailty);
        let (y1, y0) = match dgp.outcome_family {
            DgpFamily::Continuous => {
                let e = dgp.noise_sds[1] * normal(rng);
                (mu1 + e, mu0 + e)
            }
            _ => {
                let u: f64 = rng.random();
                (f64::from(u8::from(u < mu1)), f64::from(u8::from(u < mu0)))
            }
        };
        let y = if treated { y1 } else { y0 };
        out.push(SimRow { t, eligible, treated, l, l1, y, y_lag: y_prev, y1, y0, mu1, mu0, propensity });
        l_prev = l;
        a_prev = treated;
        y_prev = y;
    }
    dgp.tau + 1
}

/// Generates every patient of a dataset of size `n`, calling `visit` with
/// `(cluster, patient id parts, rows)` in generation order. Clusters are
/// patients (visit time) or participant slots (calendar time).
pub(crate) fn for_each_patient(
    dgp: &DgpSpec,
    n: usize,
    seed: u64,
    first_cluster: usize,
    mut visit: impl FnMut(usize, u32, &[SimRow]),
) {
    let mut rows = Vec::with_capacity(dgp.tau as usize);
    for c in first_cluster..first_cluster + n {
        match dgp.design {
            Design::VisitTime => {
                rows.clear();
                let mut rng = stream_rng(seed, c as u64);
                simulate_patient(dgp, &mut rng, 1, &mut rows);
                visit(c, 0, &rows);
            }
            Design::CalendarTime => {
                let mut t0 = 1;
                let mut entrant = 0u32;
                while t0 <= dgp.tau {
                    rows.clear();
                    let mut rng = stream_rng(seed, c as u64 | (u64::from(entrant) << 32));
                    let next = simulate_patient(dgp, &mut rng, t0, &mut rows);
                    visit(c, entrant, &rows);
                    t0 = next;
                    entrant += 1;
                }
            }
        }
    }
}

/// Draws a dataset of `n` patients (visit time) or `n` participant slots
/// (calendar time, constant headcount with replacement of leavers).
pub fn generate(dgp: &DgpSpec, n: usize, seed: u64) -> Result<Simulated> {
    dgp.validate()?;
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let width = format!("{}", n.saturating_sub(1)).len();
    let mut records = Vec::with_capacity(n * dgp.tau as usize);
    let mut cf = Counterfactuals::default();
    for_each_patient(dgp, n, seed, 0, |c, entrant, rows| {
        let id: String = match dgp.design {
            Design::VisitTime => format!("p{c:0width$}"),
            Design::CalendarTime => format!("s{c:0width$}-{entrant:04}"),
        };
        for r in rows {
            records.push(RawRecord {
                patient_id: id.clone(),
                t: r.t,
                eligible: Some(r.eligible),
                treated: r.treated,
                covariates: alloc::vec![r.l],
                outcome: r.y,
            });
            if dgp.emit_counterfactuals {
                cf.y1.push(r.y1);
                cf.y0.push(r.y0);
                cf.mu1.push(r.mu1);
                cf.mu0.push(r.mu0);
                cf.propensity.push(r.propensity);
            }
        }
    });
    let dataset = PanelDataset::new(alloc::vec!["L".into()], records, dgp.design, Some(dgp.panel_family()))?;
    debug_assert!(dataset.observations().windows(2).all(|w| {
        (w[0].patient_id.as_str(), w[0].t) < (w[1].patient_id.as_str(), w[1].t)
    }));
    Ok(Simulated { dataset, counterfactuals: dgp.emit_counterfactuals.then_some(cf) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        for dgp in [
            DgpSpec::setting1(Design::CalendarTime),
            DgpSpec::setting2(Design::VisitTime),
            DgpSpec::binary_logit(),
            DgpSpec::binary_probit_frailty(),
        ] {
            let a = generate(&dgp, 300, 11).unwrap();
            let b = generate(&dgp, 300, 11).unwrap();
            assert_eq!(a, b);
            let cf = a.counterfactuals.as_ref().unwrap();
            for (i, o) in a.dataset.observations().iter().enumerate() {
                let expect = if o.treated { cf.y1[i] } else { cf.y0[i] };
                assert_eq!(o.outcome, expect);
            }
            assert!(a.dataset.is_treatment_naive());
            let c = generate(&dgp, 300, 12).unwrap();
            assert_ne!(a.dataset, c.dataset);
        }
    }

    #[test]
    fn calendar_headcount_constant() {
        let dgp = DgpSpec { tau: 5, ..DgpSpec::setting1(Design::CalendarTime) };
        let s = generate(&dgp, 200, 3).unwrap();
        for t in 1..=5 {
            assert_eq!(s.dataset.at_risk(t), 200);
        }
        assert!(s.dataset.n_clusters() > 200);
    }

    #[test]
    fn visit_counts_non_increasing() {
        let dgp = DgpSpec { tau: 4, ..DgpSpec::setting1(Design::VisitTime) };
        let s = generate(&dgp, 500, 5).unwrap();
        let counts = crate::panel::emulate_trials(&s.dataset).counts();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        assert_eq!(s.dataset.observations().len(), 500 * 4);
    }

    #[test]
    fn constant_effect_counterfactual_difference() {
        let s = generate(&DgpSpec::setting1(Design::VisitTime), 2000, 9).unwrap();
        let cf = s.counterfactuals.unwrap();
        for (i, o) in s.dataset.observations().iter().enumerate() {
            if o.eligible {
                assert!((cf.y1[i] - cf.y0[i] - 1.0).abs() < 1e-12);
            }
        }
    }
}
