use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{generate, DgpSpec};
use crate::comparators::{default_terms, pooled_ols};
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    estimate, fit_nuisance, Estimand, EstimateReport, Method, MethodKind, Needs, Options, Target, WorkingModels,
};
use crate::glm::Link;
use crate::math::{mean, sample_sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EstimatorKind {
    Proposed { estimand: Estimand, method: Method },
    PooledOls,
}

impl EstimatorKind {
    pub fn target(self) -> Target {
        match self {
            EstimatorKind::Proposed { estimand, .. } => estimand.into(),
            EstimatorKind::PooledOls => Target::Coefficient,
        }
    }

    pub fn method(self) -> MethodKind {
        match self {
            EstimatorKind::Proposed { method, .. } => method.into(),
            EstimatorKind::PooledOls => MethodKind::PooledOls,
        }
    }
}

/// One estimator of a study together with the value its bias and
/// coverage are measured against.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyEstimator {
    pub label: String,
    pub kind: EstimatorKind,
    /// Link of the binary nuisance regressions.
    pub link: Link,
    pub truncation: Option<f64>,
    pub target: f64,
    /// Estimand whose limit `target` is, for estimators of a model coefficient.
    pub reference: Option<Estimand>,
}

impl StudyEstimator {
    pub fn new(kind: EstimatorKind, target: f64) -> Self {
        let label = match kind {
            EstimatorKind::Proposed { estimand, method } => format!("{}-{}", estimand_name(estimand), method_name(method)),
            EstimatorKind::PooledOls => "pooled_ols".to_string(),
        };
        StudyEstimator { label, kind, link: Link::Logit, truncation: None, target, reference: None }
    }
}

pub(crate) fn estimand_name(e: Estimand) -> &'static str {
    match e {
        Estimand::PsiU => "psi_u",
        Estimand::PsiE => "psi_e",
        Estimand::PsiB => "psi_b",
    }
}

pub(crate) fn method_name(m: Method) -> &'static str {
    match m {
        Method::Ipw => "ipw",
        Method::Gcomp => "gcomp",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub dgp: DgpSpec,
    pub estimators: Vec<StudyEstimator>,
    pub reps: usize,
    pub n: usize,
    pub master_seed: u64,
}

/// Results of one replication in estimator order, or the first failure.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub rep: usize,
    pub seed: u64,
    pub result: core::result::Result<Vec<EstimateReport>, String>,
}

/// Seed of replication `rep`: SplitMix64 of the master seed offset by the counter.
pub fn replication_seed(master_seed: u64, rep: usize) -> u64 {
    let mut z = master_seed.wrapping_add((rep as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates replication `rep` and runs every estimator on it. Nuisance
/// models are fitted once per link.
pub fn run_replication(study: &Study, rep: usize) -> ReplicationOutcome {
    let seed = replication_seed(study.master_seed, rep);
    let result = replication_reports(study, seed).map_err(|e| e.to_string());
    ReplicationOutcome { rep, seed, result }
}

fn replication_reports(study: &Study, seed: u64) -> Result<Vec<EstimateReport>> {
    let ds = generate(&study.dgp, study.n, seed)?.dataset;
    let mut links: Vec<Link> = Vec::new();
    for e in &study.estimators {
        if matches!(e.kind, EstimatorKind::Proposed { .. }) && !links.contains(&e.link) {
            links.push(e.link);
        }
    }
    let mut nuisance = Vec::with_capacity(links.len());
    for &link in &links {
        let needs = study
            .estimators
            .iter()
            .filter(|e| e.link == link)
            .filter_map(|e| match e.kind {
                EstimatorKind::Proposed { estimand, method } => Some(Needs::for_estimator(estimand, method)),
                EstimatorKind::PooledOls => None,
            })
            .fold(Needs::default(), Needs::union);
        let models = WorkingModels::default_for(&ds).with_binary_link(link);
        nuisance.push(fit_nuisance(&ds, &models, needs)?);
    }
    study
        .estimators
        .iter()
        .map(|e| match e.kind {
            EstimatorKind::Proposed { estimand, method } => {
                let k = links.iter().position(|&l| l == e.link).expect("link fitted above");
                let opts = Options { truncation: e.truncation, ..Options::default() };
                estimate(&ds, &nuisance[k], estimand, method, opts)
            }
            EstimatorKind::PooledOls => pooled_ols(&ds, &default_terms(&ds)),
        })
        .collect()
}

/// Monte Carlo summary of one estimator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct McRow {
    pub estimator: String,
    /// Estimand of the target; `coefficient` when an estimator's target is its own limit.
    pub estimand: Target,
    pub method: MethodKind,
    /// Mean point estimate.
    pub estimate: f64,
    pub bias: f64,
    pub mean_se: f64,
    /// Empirical SD of the estimates; absent with a single replication.
    pub sd: Option<f64>,
    pub coverage: f64,
    pub target: f64,
    /// Replications that entered the summary.
    pub reps: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MonteCarloTable {
    pub rows: Vec<McRow>,
    pub reps: usize,
    pub n: usize,
    pub failures: usize,
}

impl MonteCarloTable {
    pub fn row(&self, estimator: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }
}

/// Summarizes replication outcomes (in replication order). Failed
/// replications are excluded; more than 1% failures is an error.
pub fn aggregate(study: &Study, outcomes: &[ReplicationOutcome]) -> Result<MonteCarloTable> {
    let ok: Vec<&Vec<EstimateReport>> = outcomes.iter().filter_map(|o| o.result.as_ref().ok()).collect();
    let failures = outcomes.len() - ok.len();
    if failures * 100 > outcomes.len() {
        let first = outcomes.iter().find_map(|o| o.result.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::Numerical(format!(
            "{failures} of {} replications failed (first: {first})",
            outcomes.len()
        )));
    }
    if ok.is_empty() {
        return Err(invalid("no successful replications"));
    }
    let rows = study
        .estimators
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let points: Vec<f64> = ok.iter().map(|r| r[k].point).collect();
            let ses: Vec<f64> = ok.iter().map(|r| r[k].se).collect();
            let covered = ok.iter().filter(|r| r[k].covers(e.target)).count();
            let estimate = mean(&points);
            McRow {
                estimator: e.label.clone(),
                estimand: e.reference.map_or(e.kind.target(), Target::from),
                method: e.kind.method(),
                estimate,
                bias: estimate - e.target,
                mean_se: mean(&ses),
                sd: sample_sd(&points),
                coverage: covered as f64 / ok.len() as f64,
                target: e.target,
                reps: ok.len(),
                n: study.n,
            }
        })
        .collect();
    Ok(MonteCarloTable { rows, reps: outcomes.len(), n: study.n, failures })
}

/// Runs every replication serially and aggregates.
pub fn replicate_study(study: &Study) -> Result<MonteCarloTable> {
    if study.reps == 0 || study.n == 0 || study.estimators.is_empty() {
        return Err(invalid("a study needs reps >= 1, n >= 1 and at least one estimator"));
    }
    study.dgp.validate()?;
    let outcomes: Vec<ReplicationOutcome> = (0..study.reps).map(|r| run_replication(study, r)).collect();
    aggregate(study, &outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Design;
    use alloc::vec;

    fn study(reps: usize) -> Study {
        Study {
            dgp: DgpSpec::setting1(Design::VisitTime),
            estimators: vec![
                StudyEstimator::new(EstimatorKind::Proposed { estimand: Estimand::PsiB, method: Method::Gcomp }, 1.0),
                StudyEstimator::new(EstimatorKind::PooledOls, 1.0),
            ],
            reps,
            n: 200,
            master_seed: 17,
        }
    }

    #[test]
    fn deterministic_and_labelled() {
        let a = replicate_study(&study(3)).unwrap();
        let b = replicate_study(&study(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows[0].estimator, "psi_b-gcomp");
        assert_eq!(a.rows[1].estimator, "pooled_ols");
        assert!(a.rows.iter().all(|r| r.sd.unwrap() >= 0.0 && (0.0..=1.0).contains(&r.coverage)));
    }

    #[test]
    fn single_replication_has_no_sd() {
        let t = replicate_study(&study(1)).unwrap();
        for r in &t.rows {
            assert!(r.sd.is_none());
            assert!(r.coverage == 0.0 || r.coverage == 1.0);
        }
    }

    #[test]
    fn seeds_distinct() {
        let s: Vec<u64> = (0..1000).map(|r| replication_seed(5, r)).collect();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), s.len());
    }

    #[test]
    fn too_many_failures_abort() {
        let st = study(2);
        let mut outcomes: Vec<ReplicationOutcome> = (0..2).map(|r| run_replication(&st, r)).collect();
        outcomes[1].result = Err("boom".into());
        assert!(aggregate(&st, &outcomes).is_err());
    }
}
