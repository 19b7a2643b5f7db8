//! Replications on a rayon pool.
//!
//! Every replication draws from its own seed and results are reduced in
//! replication order, so the output does not depend on the thread count.

use rayon::prelude::*;
use tte_core::math::{mean, sample_sd};
use tte_core::simgen::{
    aggregate, marginal_logodds_oracle, noncollapsibility_dgp, per_trial_marginal_effects, replication_seed,
    run_replication, MonteCarloTable, NcFamily, ReplicationOutcome, Study,
};

use crate::io::NcRow;
use crate::Error;

/// Pool with `threads` workers; `None` uses rayon's default.
pub fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool, Error> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        b = b.num_threads(k);
    }
    b.build().map_err(|e| tte_core::Error::Numerical(format!("thread pool: {e}")).into())
}

/// Parallel counterpart of [`tte_core::simgen::replicate_study`] with identical output.
pub fn replicate_study_parallel(study: &Study, threads: Option<usize>) -> Result<MonteCarloTable, Error> {
    if study.reps == 0 || study.n == 0 || study.estimators.is_empty() {
        return Err(tte_core::Error::Invalid("a study needs reps >= 1, n >= 1 and at least one estimator".into()).into());
    }
    study.dgp.validate()?;
    let outcomes: Vec<ReplicationOutcome> =
        pool(threads)?.install(|| (0..study.reps).into_par_iter().map(|r| run_replication(study, r)).collect());
    Ok(aggregate(study, &outcomes)?)
}

fn family_name(f: NcFamily) -> &'static str {
    match f {
        NcFamily::Binary => "binary",
        NcFamily::Continuous => "continuous",
    }
}

/// Per-visit marginal treatment effects of the five-visit noncollapsibility
/// process, averaged over `reps` datasets of `n` patients, for both outcome
/// families. Binary rows carry the quadrature log-odds ratio as oracle,
/// continuous rows the true effect 1.
pub fn noncollapsibility_demo(reps: usize, n: usize, seed: u64, threads: Option<usize>) -> Result<Vec<NcRow>, Error> {
    if reps == 0 || n == 0 {
        return Err(tte_core::Error::Invalid("reps and n must be at least 1".into()).into());
    }
    let mut rows = Vec::new();
    for family in [NcFamily::Binary, NcFamily::Continuous] {
        let per_rep: Vec<Vec<f64>> = pool(threads)?.install(|| {
            (0..reps)
                .into_par_iter()
                .map(|r| {
                    let ds = noncollapsibility_dgp(n, replication_seed(seed, r), family)?;
                    per_trial_marginal_effects(&ds)
                })
                .collect::<Result<_, _>>()
        })?;
        let tau = per_rep[0].len();
        for k in 0..tau {
            let t = k as u32 + 1;
            let est: Vec<f64> = per_rep.iter().map(|v| v[k]).collect();
            rows.push(NcRow {
                family: family_name(family).into(),
                t,
                mean_estimate: mean(&est),
                sd: sample_sd(&est),
                oracle: match family {
                    NcFamily::Binary => marginal_logodds_oracle(t),
                    NcFamily::Continuous => 1.0,
                },
                reps,
                n,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tte_core::estimators::{Estimand, Method};
    use tte_core::panel::Design;
    use tte_core::simgen::{replicate_study, DgpSpec, EstimatorKind, StudyEstimator};

    #[test]
    fn parallel_matches_serial() {
        let study = Study {
            dgp: DgpSpec::setting1(Design::CalendarTime),
            estimators: vec![
                StudyEstimator::new(EstimatorKind::Proposed { estimand: Estimand::PsiU, method: Method::Ipw }, 1.0),
                StudyEstimator::new(EstimatorKind::PooledOls, 1.0),
            ],
            reps: 6,
            n: 150,
            master_seed: 3,
        };
        let serial = replicate_study(&study).unwrap();
        for threads in [1, 3] {
            assert_eq!(replicate_study_parallel(&study, Some(threads)).unwrap(), serial);
        }
    }

    #[test]
    fn demo_shape_and_determinism() {
        let a = noncollapsibility_demo(3, 500, 9, Some(2)).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, noncollapsibility_demo(3, 500, 9, Some(1)).unwrap());
        assert!(noncollapsibility_demo(0, 500, 9, None).is_err());
    }
}
