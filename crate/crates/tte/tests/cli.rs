use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tte::io::{ingest_long_csv, read_monte_carlo_csv, read_nc_csv, read_reports_csv, write_long_csv, LimitRecord, Schema};
use tte_core::panel::Design;
use tte_core::simgen::{generate, marginal_logodds_oracle, DgpSpec};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tte")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_csv_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("setting1.json");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let cf = dir.path().join("cf.csv");
    for out in [&a, &b] {
        let o = tte(&["simulate", "--config", path_str(&cfg), "--n", "100", "--seed", "7", "--out", path_str(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,t,elig,treat,y,L");
    assert!(lines.len() - 1 <= 200 && lines.len() - 1 >= 100);

    let o = tte(&[
        "simulate", "--config", path_str(&cfg), "--n", "100", "--seed", "7", "--out", path_str(&a),
        "--counterfactuals", path_str(&cf),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&a).unwrap(), text);
    let cf_text = std::fs::read_to_string(&cf).unwrap();
    assert_eq!(cf_text.lines().count(), lines.len());
    assert!(cf_text.starts_with("id,t,y1,y0,mu1,mu0,propensity\n"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"design\": ").unwrap();
    let out = dir.path().join("x.csv");
    let o = tte(&["simulate", "--config", path_str(&bad), "--out", path_str(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.json"));
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&tte(&["simulate", "--config", path_str(&missing)])), 2);
    let cfg = configs().join("setting1.json");
    assert_eq!(code(&tte(&["replicate", "--config", path_str(&cfg), "--reps", "0"])), 2);
    assert_eq!(code(&tte(&["replicate", "--config", path_str(&cfg), "--truncate", "abc"])), 2);
    assert_eq!(code(&tte(&["limits", "--config", path_str(&cfg), "--mc-n", "10"])), 2);
    assert_eq!(code(&tte(&["analyze", "--data", path_str(&missing)])), 2);
}

#[test]
fn shipped_configs_parse() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap().to_str().unwrap().starts_with("formula") {
            tte::config::FormulaConfig::read(&path).unwrap();
        } else {
            tte::config::read_dgp(&path).unwrap();
        }
    }
    let s1 = tte::config::read_dgp(&configs().join("setting1.json")).unwrap();
    assert_eq!(s1, DgpSpec { emit_counterfactuals: false, ..DgpSpec::setting1(Design::VisitTime) });
}

#[test]
fn long_csv_round_trip() {
    for dgp in [
        DgpSpec::setting1(Design::VisitTime),
        DgpSpec::setting2(Design::CalendarTime),
        DgpSpec::binary_logit(),
        DgpSpec::binary_probit_frailty(),
    ] {
        let ds = generate(&dgp, 150, 4).unwrap().dataset;
        let mut buf = Vec::new();
        write_long_csv(&ds, &mut buf).unwrap();
        let back = ingest_long_csv(buf.as_slice(), &Schema::default(), dgp.design, Some(ds.outcome_family())).unwrap();
        assert_eq!(back, ds);
    }
}

#[test]
fn replicate_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("setting1_calendar.json");
    let mut texts = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("mc{threads}.csv"));
        let o = tte(&[
            "replicate", "--config", path_str(&cfg), "--reps", "8", "--n", "200", "--seed", "5", "--threads",
            threads, "--out", path_str(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        texts.push(std::fs::read_to_string(&out).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    assert!(texts[0].starts_with("estimator,estimand,method,estimate,bias,mean_se,sd,coverage,target,reps,n\n"));
    let rows = read_monte_carlo_csv(texts[0].as_bytes()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.estimator.as_str()).collect();
    assert_eq!(
        labels,
        ["psi_u-ipw", "psi_u-gcomp", "psi_e-ipw", "psi_e-gcomp", "pooled_ols-psi_u", "pooled_ols-psi_e"]
    );
    assert!(rows.iter().all(|r| r.reps == 8 && r.n == 200 && r.target == 1.0));
    assert_eq!(rows[4].estimand, "psi_u");
}

fn simulated_visit_csv(dir: &Path) -> PathBuf {
    let data = dir.join("visit.csv");
    let cfg = configs().join("setting1.json");
    let o = tte(&["simulate", "--config", path_str(&cfg), "--n", "400", "--seed", "3", "--out", path_str(&data)]);
    assert_eq!(code(&o), 0);
    data
}

#[test]
fn analyze_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated_visit_csv(dir.path());
    let out = dir.path().join("est.csv");
    let o = tte(&[
        "analyze", "--data", path_str(&data), "--estimand", "psi_b", "--method", "gcomp", "--out", path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_reports_csv(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].estimand.as_str(), rows[0].method.as_str()), ("psi_b", "gcomp"));
    assert!(rows[0].se.is_finite() && rows[0].se > 0.0);
    assert!(rows[0].ci_lower < rows[0].point && rows[0].point < rows[0].ci_upper);

    let diag = std::fs::read_to_string(dir.path().join("est_diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 1 + 2 * 2);
    assert!(diag.starts_with("t,treated,count,min,max,below_threshold,bin_00,"));

    let all = dir.path().join("all.json");
    let o = tte(&["analyze", "--data", path_str(&data), "--out", path_str(&all)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&all).unwrap()).unwrap();
    let reports = json.as_array().unwrap();
    assert_eq!(reports.len(), 6);
    for r in reports {
        let trunc = r["truncation_percentile"].as_f64();
        match r["method"].as_str().unwrap() {
            "ipw" => assert_eq!(trunc, Some(95.0)),
            _ => assert_eq!(trunc, None),
        }
    }
}

#[test]
fn analyze_formula_config_and_scale_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated_visit_csv(dir.path());
    let formula = configs().join("formula_default.json");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(code(&tte(&["analyze", "--data", path_str(&data), "--out", path_str(&a)])), 0);
    let o = tte(&["analyze", "--data", path_str(&data), "--config", path_str(&formula), "--out", path_str(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());

    let bad = dir.path().join("f.json");
    std::fs::write(&bad, r#"{"outcome": ["Z"]}"#).unwrap();
    let o = tte(&["analyze", "--data", path_str(&data), "--config", path_str(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`Z`"));

    let o = tte(&["analyze", "--data", path_str(&data), "--scale", "logodds"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn empty_trial_names_eligibility_positivity() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("gap.csv");
    // Nobody is eligible at t = 2: the untreated leave after t = 1.
    let mut text = String::from("id,t,treat,y,L\n");
    let l = [-1.2, -0.7, -0.3, 0.1, 0.4, 0.9, 1.3, -0.5, 0.6, 0.2];
    let a = [0, 1, 0, 0, 1, 1, 0, 1, 0, 1];
    for i in 0..10 {
        text.push_str(&format!("p{i},1,{},{},{}\n", a[i], 0.5 * l[i] + a[i] as f64 + 0.1 * i as f64, l[i]));
        if a[i] == 1 {
            text.push_str(&format!("p{i},2,1,{},{}\n", 1.0 + l[i], 0.5 * l[i]));
        }
    }
    std::fs::write(&data, text).unwrap();
    let o = tte(&["analyze", "--data", path_str(&data), "--design", "calendar", "--estimand", "psi_u"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("positivity of eligibility"), "{}", stderr(&o));
}

#[test]
fn demo_noncollapsibility_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nc.csv");
    let args = ["demo-noncollapsibility", "--reps", "4", "--n", "2000", "--seed", "2", "--out", path_str(&out)];
    assert_eq!(code(&tte(&args)), 0);
    let first = std::fs::read_to_string(&out).unwrap();
    assert_eq!(code(&tte(&args)), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
    let rows = read_nc_csv(first.as_bytes()).unwrap();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        let oracle = if r.family == "binary" { marginal_logodds_oracle(r.t) } else { 1.0 };
        assert_eq!(r.oracle, oracle);
        assert_eq!((r.reps, r.n), (4, 2000));
    }
}

#[test]
fn limits_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("limits.json");
    let cfg = configs().join("setting2_visit.json");
    let o = tte(&["limits", "--config", path_str(&cfg), "--mc-n", "100000", "--seed", "9", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs: Vec<LimitRecord> = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let names: Vec<&str> = recs.iter().map(|r| r.estimator.as_str()).collect();
    assert_eq!(names, ["psi_u", "psi_e", "psi_b", "pooled_ols", "g_estimator"]);
    assert!(recs.iter().all(|r| r.mc_n == 100_000 && r.seed == 9 && r.mc_se >= 0.0));
    assert!(recs[1..].iter().all(|r| r.mc_se > 0.0));
    assert!((recs[0].limit - 1.5).abs() < 1e-12);
}
