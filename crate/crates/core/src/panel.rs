//! Person-time data for sequentially emulated trials.
//!
//! A [`PanelDataset`] holds one [`Observation`] per (patient, visit), sorted by
//! patient and then visit. Each visit `t` opens a trial whose participants are
//! the rows with `eligible = true`; a patient eligible at several visits
//! contributes one clone per trial, and all clones of a patient form one
//! cluster for variance estimation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Design {
    /// Trials nested within one cohort: the population at `t + 1` is a subset of that at `t`.
    VisitTime,
    /// Trials on calendar dates: patients may enter and leave between trials.
    CalendarTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OutcomeFamily {
    Continuous,
    Binary,
}

/// One person-time record.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub patient_id: String,
    pub t: u32,
    pub eligible: bool,
    pub treated: bool,
    pub covariates: Vec<f64>,
    pub outcome: f64,
    /// Outcome at the previous visit; 0 on a patient's first occurrence.
    pub lagged_outcome: f64,
    /// Covariates at the patient's first occurrence, repeated on every row.
    pub baseline_covariates: Vec<f64>,
}

/// Unvalidated input row, as read from a file or produced by a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub patient_id: String,
    pub t: u32,
    /// `None` when eligibility is to be derived with the treatment-naive rule.
    pub eligible: Option<bool>,
    pub treated: bool,
    pub covariates: Vec<f64>,
    pub outcome: f64,
}

/// How eligibility is assigned from a patient's history.
pub enum EligibilityRule<'a> {
    /// `I_t = 1 − A_{t−1}` with `A_0 = 0`.
    TreatmentNaive,
    /// Predicate over one patient's rows (sorted by `t`) and the index of the current row.
    Custom(&'a dyn Fn(&[Observation], usize) -> bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    covariate_names: Vec<String>,
    observations: Vec<Observation>,
    tau: u32,
    design: Design,
    outcome_family: OutcomeFamily,
    clusters: Vec<Range<usize>>,
}

impl PanelDataset {
    /// Validates and assembles a dataset.
    ///
    /// Rows are sorted by `(patient_id, t)`, lagged outcomes and baseline
    /// covariates are filled in, and eligibility is derived with the
    /// treatment-naive rule when no record carries it. `family = None`
    /// infers binary when every outcome is 0 or 1.
    pub fn new(
        covariate_names: Vec<String>,
        mut records: Vec<RawRecord>,
        design: Design,
        family: Option<OutcomeFamily>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("dataset has no rows"));
        }
        let n_cov = covariate_names.len();
        let given = records.iter().filter(|r| r.eligible.is_some()).count();
        if given != 0 && given != records.len() {
            return Err(invalid("eligibility must be given on every row or on none"));
        }
        for r in &records {
            if r.t == 0 {
                return Err(invalid(format!("patient `{}`: visit index must be >= 1", r.patient_id)));
            }
            if r.covariates.len() != n_cov {
                return Err(invalid(format!(
                    "patient `{}` t={}: expected {} covariates, found {}",
                    r.patient_id,
                    r.t,
                    n_cov,
                    r.covariates.len()
                )));
            }
            if !r.outcome.is_finite() || r.covariates.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "patient `{}` t={}: non-finite value",
                    r.patient_id, r.t
                )));
            }
        }
        records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(a.t.cmp(&b.t)));

        let binary = records.iter().all(|r| r.outcome == 0.0 || r.outcome == 1.0);
        let outcome_family = match family {
            Some(OutcomeFamily::Binary) if !binary => {
                return Err(invalid("binary outcome family requires outcomes in {0, 1}"))
            }
            Some(f) => f,
            None if binary => OutcomeFamily::Binary,
            None => OutcomeFamily::Continuous,
        };

        let clusters = cluster_ranges(&records, |r| &r.patient_id);
        let mut observations = Vec::with_capacity(records.len());
        for range in &clusters {
            let rows = &records[range.clone()];
            let first = &rows[0];
            if design == Design::VisitTime {
                // Nested cohorts: every patient enters at t = 1 and stays until last seen.
                for (k, r) in rows.iter().enumerate() {
                    if r.t != k as u32 + 1 {
                        return Err(invalid(format!(
                            "visit-time design: patient `{}` must be observed at consecutive visits from t=1",
                            first.patient_id
                        )));
                    }
                }
            }
            for (k, r) in rows.iter().enumerate() {
                if k > 0 {
                    let prev = &rows[k - 1];
                    if prev.t == r.t {
                        return Err(Error::DuplicateRecord { patient: r.patient_id.clone(), t: r.t });
                    }
                    if prev.treated && !r.treated {
                        return Err(Error::NonMonotoneTreatment { patient: r.patient_id.clone(), t: r.t });
                    }
                }
                let lagged_outcome = match k {
                    0 => 0.0,
                    _ if rows[k - 1].t + 1 == r.t => rows[k - 1].outcome,
                    _ => 0.0,
                };
                let eligible = match r.eligible {
                    Some(e) => e,
                    None => k == 0 || !rows[k - 1].treated,
                };
                observations.push(Observation {
                    patient_id: r.patient_id.clone(),
                    t: r.t,
                    eligible,
                    treated: r.treated,
                    covariates: r.covariates.clone(),
                    outcome: r.outcome,
                    lagged_outcome,
                    baseline_covariates: first.covariates.clone(),
                });
            }
        }
        let tau = observations.iter().map(|o| o.t).max().unwrap_or(0);
        Ok(PanelDataset { covariate_names, observations, tau, design, outcome_family, clusters })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn tau(&self) -> u32 {
        self.tau
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn outcome_family(&self) -> OutcomeFamily {
        self.outcome_family
    }

    /// Row ranges of each patient, in patient order.
    pub fn clusters(&self) -> &[Range<usize>] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster index of every row.
    pub fn row_clusters(&self) -> Vec<usize> {
        let mut out = vec![0; self.observations.len()];
        for (c, r) in self.clusters.iter().enumerate() {
            out[r.clone()].fill(c);
        }
        out
    }

    /// Number of patients at risk of entering trial `t`: the whole cohort in
    /// a visit-time design, the patients observed at `t` in a calendar-time one.
    pub fn at_risk(&self, t: u32) -> usize {
        match self.design {
            Design::VisitTime => self.clusters.len(),
            Design::CalendarTime => self.observations.iter().filter(|o| o.t == t).count(),
        }
    }

    /// Back to raw records (eligibility kept explicit).
    pub fn to_records(&self) -> Vec<RawRecord> {
        self.observations
            .iter()
            .map(|o| RawRecord {
                patient_id: o.patient_id.clone(),
                t: o.t,
                eligible: Some(o.eligible),
                treated: o.treated,
                covariates: o.covariates.clone(),
                outcome: o.outcome,
            })
            .collect()
    }

    /// Same dataset with replaced outcomes (lagged outcomes recomputed) and the same outcome family.
    pub fn with_outcomes(&self, outcomes: &[f64]) -> Result<Self> {
        if outcomes.len() != self.observations.len() {
            return Err(invalid("outcome vector length differs from row count"));
        }
        let mut records = self.to_records();
        for (r, &y) in records.iter_mut().zip(outcomes) {
            r.outcome = y;
        }
        PanelDataset::new(self.covariate_names.clone(), records, self.design, Some(self.outcome_family))
    }

    /// Recomputes eligibility with `rule`.
    pub fn derive_eligibility(&self, rule: &EligibilityRule<'_>) -> PanelDataset {
        let mut out = self.clone();
        for range in &self.clusters {
            let rows = &self.observations[range.clone()];
            for (k, idx) in range.clone().enumerate() {
                out.observations[idx].eligible = match rule {
                    EligibilityRule::TreatmentNaive => k == 0 || !rows[k - 1].treated,
                    EligibilityRule::Custom(pred) => pred(rows, k),
                };
            }
        }
        out
    }

    /// True when every row satisfies `I_t = 1 − A_{t−1}`.
    pub fn is_treatment_naive(&self) -> bool {
        self.clusters.iter().all(|range| {
            let rows = &self.observations[range.clone()];
            rows.iter()
                .enumerate()
                .all(|(k, o)| o.eligible == (k == 0 || !rows[k - 1].treated))
        })
    }
}

pub(crate) fn cluster_ranges<T>(rows: &[T], key: impl Fn(&T) -> &String) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || key(&rows[i]) != key(&rows[start]) {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// One emulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub t: u32,
    /// Dataset rows of the eligible clones.
    pub rows: Vec<usize>,
    pub n_treated: usize,
    pub n_control: usize,
    pub at_risk: usize,
}

impl Trial {
    pub fn n_eligible(&self) -> usize {
        self.rows.len()
    }

    /// Sample proportion of eligible patients among those at risk.
    pub fn eligible_fraction(&self) -> f64 {
        if self.at_risk == 0 {
            0.0
        } else {
            self.rows.len() as f64 / self.at_risk as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialTable {
    pub trials: Vec<Trial>,
}

impl TrialTable {
    pub fn counts(&self) -> Vec<usize> {
        self.trials.iter().map(Trial::n_eligible).collect()
    }

    /// Trials without any eligible patient.
    pub fn empty_trials(&self) -> Vec<u32> {
        self.trials.iter().filter(|t| t.rows.is_empty()).map(|t| t.t).collect()
    }

    pub fn trial(&self, t: u32) -> &Trial {
        &self.trials[(t - 1) as usize]
    }
}

/// Clone expansion: the eligible population of every trial `t = 1..=τ`.
pub fn emulate_trials(ds: &PanelDataset) -> TrialTable {
    let mut trials: Vec<Trial> = (1..=ds.tau)
        .map(|t| Trial { t, rows: Vec::new(), n_treated: 0, n_control: 0, at_risk: ds.at_risk(t) })
        .collect();
    for (i, o) in ds.observations.iter().enumerate() {
        if o.eligible {
            let trial = &mut trials[(o.t - 1) as usize];
            trial.rows.push(i);
            if o.treated {
                trial.n_treated += 1;
            } else {
                trial.n_control += 1;
            }
        }
    }
    TrialTable { trials }
}

pub const DIAGNOSTIC_BINS: usize = 20;

/// Propensity overlap summary for one (trial, arm).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PositivityDiagnostic {
    pub t: u32,
    pub treated: bool,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub below_threshold: usize,
    /// Counts over 20 equal-width bins on `[0, 1]`.
    pub bins: [usize; DIAGNOSTIC_BINS],
}

/// Histograms of fitted propensities on eligible rows, per trial and arm.
///
/// `propensities` is indexed by dataset row; only eligible rows are read.
pub fn positivity_diagnostics(
    ds: &PanelDataset,
    propensities: &[f64],
    threshold: f64,
) -> Result<Vec<PositivityDiagnostic>> {
    if propensities.len() != ds.observations.len() {
        return Err(invalid("one propensity per dataset row is required"));
    }
    let mut out = Vec::new();
    for t in 1..=ds.tau {
        for treated in [false, true] {
            let mut d = PositivityDiagnostic {
                t,
                treated,
                count: 0,
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
                below_threshold: 0,
                bins: [0; DIAGNOSTIC_BINS],
            };
            for (o, &p) in ds.observations.iter().zip(propensities) {
                if !o.eligible || o.t != t || o.treated != treated {
                    continue;
                }
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Positivity {
                        assumption: crate::error::Assumption::TreatmentPositivity,
                        detail: format!("propensity {p} outside (0, 1) for patient `{}` at t={t}", o.patient_id),
                    });
                }
                d.count += 1;
                d.min = d.min.min(p);
                d.max = d.max.max(p);
                if p < threshold {
                    d.below_threshold += 1;
                }
                let bin = ((p * DIAGNOSTIC_BINS as f64) as usize).min(DIAGNOSTIC_BINS - 1);
                d.bins[bin] += 1;
            }
            out.push(d);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn rec(id: &str, t: u32, a: bool, y: f64) -> RawRecord {
        RawRecord {
            patient_id: id.to_string(),
            t,
            eligible: None,
            treated: a,
            covariates: vec![t as f64],
            outcome: y,
        }
    }

    fn elig(ds: &PanelDataset, id: &str) -> Vec<bool> {
        ds.observations().iter().filter(|o| o.patient_id == id).map(|o| o.eligible).collect()
    }

    #[test]
    fn treatment_naive_rule() {
        let ds = PanelDataset::new(
            vec!["L".to_string()],
            vec![
                rec("a", 1, false, 0.0),
                rec("a", 2, false, 0.0),
                rec("a", 3, true, 0.0),
                rec("b", 1, true, 0.0),
                rec("b", 2, true, 0.0),
                rec("c", 1, false, 0.0),
                rec("c", 2, false, 0.0),
            ],
            Design::CalendarTime,
            None,
        )
        .unwrap();
        assert_eq!(elig(&ds, "a"), vec![true, true, true]);
        assert_eq!(elig(&ds, "b"), vec![true, false]);
        assert_eq!(elig(&ds, "c"), vec![true, true]);
        assert!(ds.is_treatment_naive());
        let again = ds.derive_eligibility(&EligibilityRule::TreatmentNaive);
        assert_eq!(again, ds);
    }

    #[test]
    fn lags_and_baseline() {
        let ds = PanelDataset::new(
            vec!["L".to_string()],
            vec![rec("x", 2, false, 5.0), rec("x", 1, false, 3.0)],
            Design::VisitTime,
            None,
        )
        .unwrap();
        let o = ds.observations();
        assert_eq!((o[0].t, o[0].lagged_outcome), (1, 0.0));
        assert_eq!((o[1].t, o[1].lagged_outcome), (2, 3.0));
        assert_eq!(o[1].baseline_covariates, vec![1.0]);
        assert_eq!(ds.outcome_family(), OutcomeFamily::Continuous);
    }

    #[test]
    fn rejects_invalid_panels() {
        let names = vec!["L".to_string()];
        let dup = PanelDataset::new(
            names.clone(),
            vec![rec("a", 1, false, 0.0), rec("a", 1, false, 1.0)],
            Design::CalendarTime,
            None,
        );
        assert!(matches!(dup, Err(Error::DuplicateRecord { .. })));
        let nonmono = PanelDataset::new(
            names.clone(),
            vec![rec("a", 1, true, 0.0), rec("a", 2, false, 1.0)],
            Design::CalendarTime,
            None,
        );
        assert!(matches!(nonmono, Err(Error::NonMonotoneTreatment { .. })));
        let late_entry = PanelDataset::new(
            names.clone(),
            vec![rec("a", 1, false, 0.0), rec("b", 2, false, 1.0)],
            Design::VisitTime,
            None,
        );
        assert!(late_entry.is_err());
        let ok = PanelDataset::new(
            names,
            vec![rec("a", 1, false, 0.0), rec("b", 2, false, 1.0)],
            Design::CalendarTime,
            None,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn custom_rule() {
        let ds = PanelDataset::new(
            vec!["L".to_string()],
            vec![rec("a", 1, false, 0.0), rec("a", 2, false, 0.0)],
            Design::VisitTime,
            None,
        )
        .unwrap();
        let only_first = |_: &[Observation], k: usize| k == 0;
        let d = ds.derive_eligibility(&EligibilityRule::Custom(&only_first));
        assert_eq!(elig(&d, "a"), vec![true, false]);
        assert!(!d.is_treatment_naive());
    }

    #[test]
    fn trial_counts_and_empty_trials() {
        let mut records = Vec::new();
        for i in 0..4 {
            let id = format!("p{i}");
            records.push(rec(&id, 1, i < 2, 0.0));
            records.push(rec(&id, 2, i < 2, 0.0));
        }
        let ds = PanelDataset::new(vec!["L".to_string()], records, Design::VisitTime, None).unwrap();
        let table = emulate_trials(&ds);
        assert_eq!(table.counts(), vec![4, 2]);
        assert_eq!(table.trial(1).n_treated, 2);
        assert_eq!(table.trial(2).n_treated, 0);
        assert_eq!(table.trial(2).eligible_fraction(), 0.5);
        assert!(table.empty_trials().is_empty());
    }

    #[test]
    fn diagnostics_counts() {
        let ds = PanelDataset::new(
            vec!["L".to_string()],
            vec![rec("a", 1, false, 0.0), rec("b", 1, false, 0.0)],
            Design::VisitTime,
            None,
        )
        .unwrap();
        let d = positivity_diagnostics(&ds, &[0.005, 0.5], 0.01).unwrap();
        let control = d.iter().find(|r| r.t == 1 && !r.treated).unwrap();
        assert_eq!(control.count, 2);
        assert_eq!(control.below_threshold, 1);
        let flat = positivity_diagnostics(&ds, &[0.5, 0.5], 0.01).unwrap();
        let control = flat.iter().find(|r| r.t == 1 && !r.treated).unwrap();
        assert_eq!(control.bins.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(control.below_threshold, 0);
        assert!(positivity_diagnostics(&ds, &[0.0, 0.5], 0.01).is_err());
    }
}
