//! The estimators as stacked estimating equations.
//!
//! Parameter vector, in order: propensity coefficients per trial (IPW),
//! outcome coefficients per trial and arm (G-computation), eligible
//! fractions `p_t` (uniform and eligibility-weighted effects),
//! participation coefficients per trial (baseline-adjusted IPW), nested
//! regression coefficients per trial and arm (baseline-adjusted
//! G-computation), then the arm means `M1`, `M0`.
//!
//! Each patient is one cluster. The arm-mean moment of a cluster is its
//! share of the plug-in sum scaled by `m`, minus `M_a`, so the root
//! reproduces the plug-in estimate exactly. A weight cap, when given, is
//! held fixed at the value computed at the fitted parameters.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::{
    baseline_rows, plugin::ArmMeans, Estimand, Method, NuisanceSet, NuisanceValues, OutcomeModels, Participation,
};
use crate::error::{Error, Result};
use crate::glm::{score_row, FittedModel, Link, ModelSpec};
use crate::mestim::EstimatingEquations;
use crate::panel::{Design, PanelDataset};

#[derive(Debug, Clone, Copy)]
struct GlmBlock {
    offset: usize,
    p: usize,
    link: Link,
}

impl GlmBlock {
    fn coefficients<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.offset..self.offset + self.p]
    }

    fn eta(&self, x: &[f64], theta: &[f64]) -> f64 {
        x.iter().zip(self.coefficients(theta)).map(|(a, b)| a * b).sum()
    }

    fn add_score(&self, x: &[f64], y: f64, theta: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let s = &mut scratch[..self.p];
        score_row(self.link, x, y, self.coefficients(theta), s);
        for (o, v) in out[self.offset..self.offset + self.p].iter_mut().zip(s.iter()) {
            *o += v;
        }
    }
}

#[derive(Debug, Clone)]
struct RowData {
    t: usize,
    treated: bool,
    y: f64,
    x_prop: Vec<f64>,
    out_block: Option<usize>,
    x_out: Vec<f64>,
    /// Prediction designs with treatment forced to `[0, 1]`.
    x_pred: [Vec<f64>; 2],
}

#[derive(Debug, Clone)]
struct ClusterData {
    /// Indices into `rows` (eligible rows only).
    rows: Range<usize>,
    at_risk: Vec<bool>,
    eligible: Vec<bool>,
    x_part: Vec<Vec<f64>>,
    x_breg: Vec<Vec<f64>>,
}

/// Estimating equations of one estimator on one dataset.
#[derive(Debug, Clone)]
pub struct StackedEstimator {
    estimand: Estimand,
    method: Method,
    tau: f64,
    m: f64,
    cap: Option<f64>,
    at_risk: Vec<f64>,
    rows: Vec<RowData>,
    clusters: Vec<ClusterData>,
    prop: Vec<Option<GlmBlock>>,
    out_blocks: Vec<GlmBlock>,
    out_for: Vec<Option<[usize; 2]>>,
    pt: Vec<Option<usize>>,
    part: Vec<Option<GlmBlock>>,
    breg: Vec<Option<[GlmBlock; 2]>>,
    m1: usize,
    m0: usize,
    dim: usize,
}

fn design(spec: &ModelSpec, o: &crate::panel::Observation, overrides: &[(crate::glm::Term, f64)]) -> Vec<f64> {
    let mut v = Vec::new();
    spec.design_row(o, overrides, &mut v);
    v
}

impl StackedEstimator {
    pub fn new(
        ds: &PanelDataset,
        nuis: &NuisanceSet,
        estimand: Estimand,
        method: Method,
        cap: Option<f64>,
    ) -> Result<Self> {
        let tau = ds.tau() as usize;
        let ipw = method == Method::Ipw;
        let missing = || Error::Invalid("nuisance set lacks models required by this estimator".into());
        let mut dim = 0;
        let mut block = |p: usize, link: Link| {
            let b = GlmBlock { offset: dim, p, link };
            dim += p;
            b
        };

        let mut prop = vec![None; tau];
        let mut out_blocks = Vec::new();
        let mut out_for = vec![None; tau];
        for t in 0..tau {
            if ipw {
                if let Some(m) = &nuis.propensity[t] {
                    prop[t] = Some(block(m.coefficients.len(), m.spec.link));
                }
            } else if let Some(om) = &nuis.outcome[t] {
                match om {
                    OutcomeModels::ArmSpecific { treated, control } => {
                        out_blocks.push(block(control.coefficients.len(), control.spec.link));
                        out_blocks.push(block(treated.coefficients.len(), treated.spec.link));
                        out_for[t] = Some([out_blocks.len() - 2, out_blocks.len() - 1]);
                    }
                    OutcomeModels::Joint(m) => {
                        out_blocks.push(block(m.coefficients.len(), m.spec.link));
                        out_for[t] = Some([out_blocks.len() - 1; 2]);
                    }
                }
            }
        }
        let at_risk: Vec<f64> = (1..=ds.tau()).map(|t| ds.at_risk(t) as f64).collect();
        let mut pt = vec![None; tau];
        if estimand != Estimand::PsiB {
            for t in 0..tau {
                if at_risk[t] > 0.0 {
                    pt[t] = Some(block(1, Link::Identity).offset);
                }
            }
        }
        let mut part = vec![None; tau];
        let mut breg = vec![None; tau];
        if estimand == Estimand::PsiB {
            if ipw {
                if nuis.participation.len() != tau {
                    return Err(missing());
                }
                for t in 0..tau {
                    if let Participation::Model(m) = &nuis.participation[t] {
                        part[t] = Some(block(m.coefficients.len(), m.spec.link));
                    }
                }
            } else {
                if nuis.baseline_regression.len() != tau {
                    return Err(missing());
                }
                for t in 0..tau {
                    if let Some([c, tr]) = &nuis.baseline_regression[t] {
                        breg[t] = Some([
                            block(c.coefficients.len(), Link::Identity),
                            block(tr.coefficients.len(), Link::Identity),
                        ]);
                    }
                }
            }
        }
        let m1 = block(1, Link::Identity).offset;
        let m0 = block(1, Link::Identity).offset;

        let obs = ds.observations();
        let base = baseline_rows(ds);
        let mut rows = Vec::new();
        let mut clusters = Vec::with_capacity(ds.n_clusters());
        for (c, range) in ds.clusters().iter().enumerate() {
            let start = rows.len();
            let mut at_risk_c = vec![ds.design() == Design::VisitTime; tau];
            let mut eligible = vec![false; tau];
            for i in range.clone() {
                let o = &obs[i];
                let t = (o.t - 1) as usize;
                at_risk_c[t] = true;
                eligible[t] = o.eligible;
                if !o.eligible {
                    continue;
                }
                let x_prop = match &nuis.propensity[t] {
                    Some(m) if ipw => design(&m.spec, o, &[]),
                    _ if ipw => return Err(missing()),
                    _ => Vec::new(),
                };
                let (out_block, x_out, x_pred) = match (&nuis.outcome[t], out_for[t]) {
                    (Some(om), Some(idx)) if !ipw => {
                        let own = if o.treated { idx[1] } else { idx[0] };
                        let spec_a = |a: bool| &om.for_arm(a).spec;
                        let force = |a: bool| [(crate::glm::Term::Treatment, f64::from(u8::from(a)))];
                        (
                            Some(own),
                            design(spec_a(o.treated), o, &[]),
                            [design(spec_a(false), o, &force(false)), design(spec_a(true), o, &force(true))],
                        )
                    }
                    _ if !ipw => return Err(missing()),
                    _ => (None, Vec::new(), [Vec::new(), Vec::new()]),
                };
                rows.push(RowData { t, treated: o.treated, y: o.outcome, x_prop, out_block, x_out, x_pred });
            }
            let b = &obs[base[c]];
            let x_part = (0..tau)
                .map(|t| match nuis.participation.get(t) {
                    Some(Participation::Model(m)) if part[t].is_some() => design(&m.spec, b, &[]),
                    _ => Vec::new(),
                })
                .collect();
            let x_breg = (0..tau)
                .map(|t| match nuis.baseline_regression.get(t) {
                    Some(Some([m, _])) if breg[t].is_some() => design(&m.spec, b, &[]),
                    _ => Vec::new(),
                })
                .collect();
            clusters.push(ClusterData { rows: start..rows.len(), at_risk: at_risk_c, eligible, x_part, x_breg });
        }

        Ok(StackedEstimator {
            estimand,
            method,
            tau: tau as f64,
            m: ds.n_clusters() as f64,
            cap,
            at_risk,
            rows,
            clusters,
            prop,
            out_blocks,
            out_for,
            pt,
            part,
            breg,
            m1,
            m0,
            dim,
        })
    }

    /// Indices of `(M1, M0)` in the parameter vector.
    pub fn arm_mean_indices(&self) -> (usize, usize) {
        (self.m1, self.m0)
    }

    /// Parameter vector at the fitted nuisance models and plug-in arm means.
    pub fn theta_at(&self, nuis: &NuisanceSet, v: &NuisanceValues, means: &ArmMeans) -> Result<Vec<f64>> {
        let mut theta = vec![0.0; self.dim];
        let put = |theta: &mut Vec<f64>, b: &GlmBlock, m: &FittedModel| {
            theta[b.offset..b.offset + b.p].copy_from_slice(&m.coefficients);
        };
        for t in 0..self.prop.len() {
            if let (Some(b), Some(m)) = (&self.prop[t], &nuis.propensity[t]) {
                put(&mut theta, b, m);
            }
            if let (Some(idx), Some(om)) = (self.out_for[t], &nuis.outcome[t]) {
                put(&mut theta, &self.out_blocks[idx[0]], om.for_arm(false));
                put(&mut theta, &self.out_blocks[idx[1]], om.for_arm(true));
            }
            if let Some(off) = self.pt[t] {
                theta[off] = v.eligibility_marginal[t];
            }
            if let (Some(b), Some(Participation::Model(m))) = (&self.part[t], nuis.participation.get(t)) {
                put(&mut theta, b, m);
            }
            if let (Some([b0, b1]), Some(Some([m0, m1]))) = (&self.breg[t], nuis.baseline_regression.get(t)) {
                put(&mut theta, b0, m0);
                put(&mut theta, b1, m1);
            }
        }
        theta[self.m1] = means.treated;
        theta[self.m0] = means.control;
        Ok(theta)
    }

    fn cluster_contribution(&self, cl: &ClusterData, theta: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let tau = self.tau;
        let p = |t: usize| self.pt[t].map_or(0.0, |o| theta[o]);
        let s: f64 = (0..self.pt.len()).map(p).sum();
        let q = |t: usize| match &self.part[t] {
            Some(b) => b.link.inverse(b.eta(&cl.x_part[t], theta)),
            None => 1.0,
        };
        // Scale of a row's share in trial t, times m.
        let k = |t: usize| match self.estimand {
            Estimand::PsiU => self.m / (tau * self.at_risk[t]),
            Estimand::PsiE => self.m / self.at_risk[t],
            Estimand::PsiB => 1.0 / tau,
        };
        let elig = |t: usize| match self.estimand {
            Estimand::PsiU => p(t),
            Estimand::PsiE => s,
            Estimand::PsiB => q(t),
        };
        let mut u = [0.0; 2];
        for r in &self.rows[cl.rows.clone()] {
            let t = r.t;
            match self.method {
                Method::Ipw => {
                    let b = self.prop[t].expect("propensity block");
                    b.add_score(&r.x_prop, f64::from(u8::from(r.treated)), theta, out, scratch);
                    let pi = b.link.inverse(b.eta(&r.x_prop, theta));
                    let arm = if r.treated { pi } else { 1.0 - pi };
                    let mut w = 1.0 / (elig(t) * arm);
                    if let Some(c) = self.cap {
                        w = w.min(c);
                    }
                    u[usize::from(r.treated)] += k(t) * r.y * w;
                }
                Method::Gcomp => {
                    let idx = self.out_for[t].expect("outcome block");
                    let own = &self.out_blocks[r.out_block.expect("outcome block")];
                    own.add_score(&r.x_out, r.y, theta, out, scratch);
                    for a in 0..2 {
                        let b = &self.out_blocks[idx[a]];
                        let mu = b.link.inverse(b.eta(&r.x_pred[a], theta));
                        match &self.breg[t] {
                            Some(br) if self.estimand == Estimand::PsiB => {
                                br[a].add_score(&cl.x_breg[t], mu, theta, out, scratch);
                            }
                            _ => u[a] += k(t) * mu / elig(t),
                        }
                    }
                }
            }
        }
        for t in 0..self.pt.len() {
            if let Some(off) = self.pt[t] {
                if cl.at_risk[t] {
                    out[off] += f64::from(u8::from(cl.eligible[t])) - theta[off];
                }
            }
            if let Some(b) = &self.part[t] {
                b.add_score(&cl.x_part[t], f64::from(u8::from(cl.eligible[t])), theta, out, scratch);
            }
            if let Some(br) = &self.breg[t] {
                for a in 0..2 {
                    u[a] += br[a].eta(&cl.x_breg[t], theta) / tau;
                }
            }
        }
        out[self.m1] = u[1] - theta[self.m1];
        out[self.m0] = u[0] - theta[self.m0];
    }
}

impl EstimatingEquations for StackedEstimator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    fn contributions(&self, theta: &[f64], out: &mut [f64]) {
        let mut scratch = vec![0.0; self.dim];
        for (cl, row) in self.clusters.iter().zip(out.chunks_exact_mut(self.dim)) {
            row.fill(0.0);
            self.cluster_contribution(cl, theta, row, &mut scratch);
        }
    }
}
