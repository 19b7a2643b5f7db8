//! CSV and JSON formats.
//!
//! Person-time data is long-format CSV with one row per (patient, visit).
//! Column names are mapped through a [`Schema`]; the defaults are `id`, `t`,
//! `elig`, `treat`, `y` and every column whose name starts with `L`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use tte_core::estimators::EstimateReport;
use tte_core::panel::{Design, OutcomeFamily, PanelDataset, PositivityDiagnostic, RawRecord};
use tte_core::simgen::{Counterfactuals, MonteCarloTable, OracleLimit};

use crate::Error;

/// Column mapping of a long-format file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub id: String,
    pub t: String,
    /// Eligibility column; derived with the treatment-naive rule when absent from the file.
    pub elig: String,
    pub treat: String,
    pub y: String,
    /// Covariate columns in order; `None` takes every column starting with `L`.
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            id: "id".into(),
            t: "t".into(),
            elig: "elig".into(),
            treat: "treat".into(),
            y: "y".into(),
            covariates: None,
        }
    }
}

fn format_error(line: u64, msg: impl Into<String>) -> Error {
    Error::Format { line, message: msg.into() }
}

fn parse_binary(field: &str, column: &str, line: u64) -> Result<bool, Error> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format_error(line, format!("column `{column}`: expected 0 or 1, found `{other}`"))),
    }
}

fn parse_float(field: &str, column: &str, line: u64) -> Result<f64, Error> {
    let s = field.trim();
    if s.is_empty() {
        return Err(format_error(line, format!("column `{column}`: missing value")));
    }
    s.parse::<f64>()
        .map_err(|_| format_error(line, format!("column `{column}`: `{s}` is not a number")))
}

/// Reads a long-format CSV into a validated dataset.
///
/// `family = None` infers a binary outcome when every value is 0 or 1.
pub fn ingest_long_csv<R: Read>(
    source: R,
    schema: &Schema,
    design: Design,
    family: Option<OutcomeFamily>,
) -> Result<PanelDataset, Error> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| find(name).ok_or_else(|| tte_core::Error::MissingColumn(name.to_string()));
    let id = required(&schema.id)?;
    let t = required(&schema.t)?;
    let treat = required(&schema.treat)?;
    let y = required(&schema.y)?;
    let elig = find(&schema.elig);
    let (names, cov): (Vec<String>, Vec<usize>) = match &schema.covariates {
        Some(cols) => {
            let idx = cols.iter().map(|c| required(c)).collect::<Result<Vec<_>, _>>()?;
            (cols.clone(), idx)
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with('L'))
            .map(|(i, h)| (h.to_string(), i))
            .unzip(),
    };

    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let patient_id = row[id].to_string();
        if patient_id.is_empty() {
            return Err(format_error(line, format!("column `{}`: missing value", schema.id)));
        }
        let t_val: u32 = row[t]
            .parse()
            .map_err(|_| format_error(line, format!("column `{}`: `{}` is not a positive integer", schema.t, &row[t])))?;
        if !seen.insert((patient_id.clone(), t_val)) {
            return Err(tte_core::Error::DuplicateRecord { patient: patient_id, t: t_val }.into());
        }
        let covariates = cov
            .iter()
            .zip(&names)
            .map(|(&c, name)| parse_float(&row[c], name, line))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(RawRecord {
            patient_id,
            t: t_val,
            eligible: elig.map(|e| parse_binary(&row[e], &schema.elig, line)).transpose()?,
            treated: parse_binary(&row[treat], &schema.treat, line)?,
            covariates,
            outcome: parse_float(&row[y], &schema.y, line)?,
        });
    }
    Ok(PanelDataset::new(names, records, design, family)?)
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes a dataset as long-format CSV with the default column names.
///
/// Floats use the shortest representation that reads back to the same value,
/// so [`ingest_long_csv`] reproduces the dataset exactly.
pub fn write_long_csv<W: Write>(ds: &PanelDataset, sink: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["id".to_string(), "t".into(), "elig".into(), "treat".into(), "y".into()];
    header.extend(ds.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for o in ds.observations() {
        let mut rec = vec![o.patient_id.clone(), o.t.to_string(), bit(o.eligible).into(), bit(o.treated).into()];
        rec.push(o.outcome.to_string());
        rec.extend(o.covariates.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes counterfactual outcomes and true propensities, row-aligned with `ds`.
pub fn write_counterfactual_csv<W: Write>(ds: &PanelDataset, cf: &Counterfactuals, sink: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["id", "t", "y1", "y0", "mu1", "mu0", "propensity"])?;
    for (i, o) in ds.observations().iter().enumerate() {
        w.write_record([
            o.patient_id.clone(),
            o.t.to_string(),
            cf.y1[i].to_string(),
            cf.y0[i].to_string(),
            cf.mu1[i].to_string(),
            cf.mu0[i].to_string(),
            cf.propensity[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Flat row of an estimate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimand: String,
    pub method: String,
    pub scale: String,
    pub point: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub truncation: Option<f64>,
}

/// Snake-case name of a unit enum variant.
pub fn variant_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("not a unit variant: {other:?}"),
    }
}

impl From<&EstimateReport> for ReportRow {
    fn from(r: &EstimateReport) -> Self {
        ReportRow {
            estimand: variant_name(&r.target),
            method: variant_name(&r.method),
            scale: variant_name(&r.scale),
            point: r.point,
            se: r.se,
            ci_lower: r.ci_lower,
            ci_upper: r.ci_upper,
            level: r.level,
            truncation: r.truncation_percentile,
        }
    }
}

pub fn write_reports_csv<W: Write>(reports: &[EstimateReport], sink: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(sink);
    for r in reports {
        w.serialize(ReportRow::from(r))?;
    }
    if reports.is_empty() {
        w.write_record(["estimand", "method", "scale", "point", "se", "ci_lower", "ci_upper", "level", "truncation"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: Read>(source: R) -> Result<Vec<ReportRow>, Error> {
    let mut r = csv::Reader::from_reader(source);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_monte_carlo_csv<W: Write>(table: &MonteCarloTable, sink: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(sink);
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Row of a Monte Carlo table read back from CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct McCsvRow {
    pub estimator: String,
    pub estimand: String,
    pub method: String,
    pub estimate: f64,
    pub bias: f64,
    pub mean_se: f64,
    pub sd: Option<f64>,
    pub coverage: f64,
    pub target: f64,
    pub reps: usize,
    pub n: usize,
}

pub fn read_monte_carlo_csv<R: Read>(source: R) -> Result<Vec<McCsvRow>, Error> {
    let mut r = csv::Reader::from_reader(source);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// One row per (trial, arm): counts, range, below-threshold count and 20 bin counts.
pub fn write_diagnostics_csv<W: Write>(diags: &[PositivityDiagnostic], sink: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = ["t", "treated", "count", "min", "max", "below_threshold"].map(String::from).into();
    header.extend((0..tte_core::panel::DIAGNOSTIC_BINS).map(|b| format!("bin_{b:02}")));
    w.write_record(&header)?;
    for d in diags {
        let (min, max) = if d.count == 0 { (String::new(), String::new()) } else { (d.min.to_string(), d.max.to_string()) };
        let mut rec = vec![d.t.to_string(), bit(d.treated).into(), d.count.to_string(), min, max, d.below_threshold.to_string()];
        rec.extend(d.bins.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-visit summary of the noncollapsibility demo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcRow {
    pub family: String,
    pub t: u32,
    pub mean_estimate: f64,
    pub sd: Option<f64>,
    /// Marginal log-odds ratio by quadrature (binary) or the constant effect 1 (continuous).
    pub oracle: f64,
    pub reps: usize,
    pub n: usize,
}

pub fn write_nc_csv<W: Write>(rows: &[NcRow], sink: W) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_nc_csv<R: Read>(source: R) -> Result<Vec<NcRow>, Error> {
    let mut r = csv::Reader::from_reader(source);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Population limit of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRecord {
    pub estimator: String,
    pub limit: f64,
    pub mc_se: f64,
    pub mc_n: usize,
    pub seed: u64,
}

impl LimitRecord {
    pub fn new(estimator: &str, l: &OracleLimit) -> Self {
        LimitRecord { estimator: estimator.into(), limit: l.limit, mc_se: l.mc_se, mc_n: l.mc_n, seed: l.seed }
    }
}

pub fn write_json<W: Write, T: Serialize + ?Sized>(value: &T, mut sink: W) -> Result<(), Error> {
    serde_json::to_writer_pretty(&mut sink, value)?;
    sink.write_all(b"\n")?;
    sink.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str) -> Result<PanelDataset, Error> {
        ingest_long_csv(text.as_bytes(), &Schema::default(), Design::VisitTime, None)
    }

    #[test]
    fn four_row_file() {
        let ds = ingest("id,t,elig,treat,y,L1\na,1,1,0,0.5,1\na,2,1,1,1.5,2\nb,1,1,1,2,0.3\nb,2,0,1,2.5,-1e-1\n").unwrap();
        assert_eq!(ds.tau(), 2);
        assert_eq!(ds.observations().len(), 4);
        assert_eq!(ds.covariate_names(), ["L1"]);
        assert_eq!(ds.observations()[3].covariates, [-0.1]);
        assert_eq!(ds.observations()[1].lagged_outcome, 0.5);
    }

    #[test]
    fn eligibility_derived_when_absent() {
        let ds = ingest("id,t,treat,y\na,1,0,0.1\na,2,1,0.2\n").unwrap();
        assert!(ds.observations().iter().all(|o| o.eligible));
    }

    #[test]
    fn input_errors() {
        let missing = ingest("id,t,y\na,1,0\n").unwrap_err();
        assert!(matches!(missing, Error::Core(tte_core::Error::MissingColumn(ref c)) if c == "treat"));
        assert!(matches!(ingest("id,t,treat,y\na,1,2,0\n").unwrap_err(), Error::Format { .. }));
        assert!(matches!(ingest("id,t,treat,y\na,1.5,0,0\n").unwrap_err(), Error::Format { .. }));
        assert!(matches!(
            ingest("id,t,treat,y\na,1,0,0\na,1,0,1\n").unwrap_err(),
            Error::Core(tte_core::Error::DuplicateRecord { .. })
        ));
        assert!(matches!(
            ingest("id,t,treat,y\na,1,1,0\na,2,0,1\n").unwrap_err(),
            Error::Core(tte_core::Error::NonMonotoneTreatment { .. })
        ));
        assert!(matches!(ingest("id,t,treat,y,L\na,1,0,0,\n").unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn custom_schema() {
        let schema = Schema {
            id: "pid".into(),
            t: "visit".into(),
            treat: "a".into(),
            y: "out".into(),
            covariates: Some(vec!["age".into()]),
            ..Schema::default()
        };
        let ds = ingest_long_csv("pid,visit,a,out,age,Lx\nq,1,0,3,40,9\n".as_bytes(), &schema, Design::VisitTime, None)
            .unwrap();
        assert_eq!(ds.covariate_names(), ["age"]);
        assert_eq!(ds.observations()[0].covariates, [40.0]);
    }

    #[test]
    fn report_round_trip() {
        let mut r = EstimateReport::new(
            tte_core::estimators::Target::PsiB,
            tte_core::estimators::MethodKind::Gcomp,
            tte_core::estimators::Scale::RiskDifference,
            0.25,
            0.1,
            0.95,
        );
        r.truncation_percentile = Some(95.0);
        let mut buf = Vec::new();
        write_reports_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("estimand,method,scale,point,se,ci_lower,ci_upper,level,truncation\n"));
        let back = read_reports_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], ReportRow::from(&r));
        assert_eq!(back[0].estimand, "psi_b");
        assert_eq!(back[0].scale, "risk_difference");
    }
}
