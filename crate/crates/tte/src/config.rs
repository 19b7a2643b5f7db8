//! JSON configuration: simulation settings and analysis formulas.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tte_core::estimators::{OutcomeStructure, WorkingModels};
use tte_core::glm::{term_by_name, Link, Term};
use tte_core::panel::PanelDataset;
use tte_core::simgen::DgpSpec;

use crate::io::Schema;
use crate::Error;

pub fn read_dgp(path: &Path) -> Result<DgpSpec, Error> {
    let text = std::fs::read_to_string(path)?;
    parse_dgp(&text)
}

pub fn parse_dgp(text: &str) -> Result<DgpSpec, Error> {
    let dgp: DgpSpec = serde_json::from_str(text)?;
    dgp.validate()?;
    Ok(dgp)
}

/// Columns of each nuisance regression, by name.
///
/// Names are `y_lag`, `t`, covariate names and `<covariate>_baseline`.
/// Omitted fields fall back to [`WorkingModels::default_for`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormulaConfig {
    pub schema: Schema,
    pub propensity: Option<Vec<String>>,
    pub propensity_link: Option<Link>,
    pub outcome: Option<Vec<String>>,
    pub outcome_link: Option<Link>,
    pub outcome_structure: Option<OutcomeStructure>,
    pub participation: Option<Vec<String>>,
    pub baseline: Option<Vec<String>>,
}

fn resolve(ds: &PanelDataset, names: &Option<Vec<String>>, default: Vec<Term>) -> Result<Vec<Term>, Error> {
    match names {
        None => Ok(default),
        Some(names) => names
            .iter()
            .map(|n| term_by_name(ds, n).ok_or_else(|| tte_core::Error::UnknownColumn(n.clone()).into()))
            .collect(),
    }
}

impl FormulaConfig {
    pub fn read(path: &Path) -> Result<Self, Error> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn working_models(&self, ds: &PanelDataset) -> Result<WorkingModels, Error> {
        let d = WorkingModels::default_for(ds);
        Ok(WorkingModels {
            propensity_terms: resolve(ds, &self.propensity, d.propensity_terms)?,
            propensity_link: self.propensity_link.unwrap_or(d.propensity_link),
            outcome_terms: resolve(ds, &self.outcome, d.outcome_terms)?,
            outcome_link: self.outcome_link.unwrap_or(d.outcome_link),
            outcome_structure: self.outcome_structure.unwrap_or(d.outcome_structure),
            participation_terms: resolve(ds, &self.participation, d.participation_terms)?,
            baseline_terms: resolve(ds, &self.baseline, d.baseline_terms)?,
        })
    }
}
