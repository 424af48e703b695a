use crm_cure::em::{profile_fit_delta_named, EmConfig};
use crm_cure::io::{
    fit_dataset, read_dataset, read_profiles, run_fit, save_dataset, write_curves, write_dataset, write_profile_curve,
    FitReport, RunConfig,
};
use crm_cure::likelihood::partition;
use crm_cure::simulation::{simulate_dataset, CovariateScale, SimConfig};
use crm_cure::{kaplan_meier, CrmModel, Cure, CureModel, Dataset, FamilyKind, FamilyParams, StressSchedule};

fn sample(n: usize, seed: u64) -> Dataset {
    simulate_dataset(&SimConfig::reference_weibull(n, 1, seed), 0).unwrap()
}

fn parse_columns(bytes: &[u8]) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse::<f64>().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn dcs_shaped_file_partitions_as_expected() {
    // 7 early events, 6 in the lag, 18 late events, 9 censored at the end
    let mut text = String::from("time,status,BF\n");
    let times = (0..7)
        .map(|i| 60.0 + 25.0 * i as f64)
        .chain((0..6).map(|i| 250.0 + 15.0 * i as f64))
        .chain((0..18).map(|i| 355.0 + 10.0 * i as f64));
    for (i, t) in times.enumerate() {
        text.push_str(&format!("{t},1,{}\n", 5.0 + i as f64));
    }
    for i in 0..9 {
        text.push_str(&format!("540,0,{}\n", 10.0 + i as f64));
    }
    let d = read_dataset(text.as_bytes(), None).unwrap();
    let part = partition(&d.records, &StressSchedule::new(240.0, 350.0, None).unwrap());
    assert_eq!((part.n(), part.m(), part.n4()), (40, 31, 9));
    assert_eq!((part.n1(), part.n2(), part.n3()), (7, 6, 18));
}

#[test]
fn dataset_csv_round_trip() {
    let d = sample(50, 1);
    let mut buf = Vec::new();
    write_dataset(&d, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice(), None).unwrap();
    assert_eq!(back, d);
}

#[test]
fn km_and_profile_csv_parse_back() {
    let d = sample(80, 2);
    let km = kaplan_meier(&d.records).unwrap();
    let mut buf = Vec::new();
    km.write_csv(&mut buf).unwrap();
    let (header, rows) = parse_columns(&buf);
    assert_eq!(header, ["time", "survival"]);
    assert_eq!(rows.len(), km.len() + 1);
    assert_eq!(rows.last().unwrap()[1], *km.values.last().unwrap());

    let scaled = d.rescaled(240.0);
    let grid = [300.0 / 240.0, 340.0 / 240.0, 380.0 / 240.0];
    let prof = profile_fit_delta_named(
        &scaled.records,
        &scaled.covariate_names,
        FamilyKind::Weibull,
        1.0,
        &grid,
        &EmConfig::default(),
    )
    .unwrap();
    let mut buf = Vec::new();
    write_profile_curve(&prof.curve, 240.0, &mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let taus: Vec<f64> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    for (got, want) in taus.iter().zip([300.0, 340.0, 380.0]) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn profile_search_is_deterministic() {
    let d = sample(120, 3).rescaled(240.0);
    let grid: Vec<f64> = (0..7).map(|i| (280.0 + 20.0 * i as f64) / 240.0).collect();
    let cfg = EmConfig {
        compute_se: false,
        ..Default::default()
    };
    let a = profile_fit_delta_named(&d.records, &d.covariate_names, FamilyKind::Weibull, 1.0, &grid, &cfg).unwrap();
    let b = profile_fit_delta_named(&d.records, &d.covariate_names, FamilyKind::Weibull, 1.0, &grid, &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.best_tau2, b.best_tau2);
}

#[test]
fn rescaling_time_shifts_mll_by_event_count() {
    let d = sample(150, 4);
    let c = 3.0;
    let mut stretched = d.clone();
    for r in &mut stretched.records {
        r.time *= c;
    }
    let mut cfg = RunConfig::new("unused.csv".into(), FamilyKind::Weibull, 240.0);
    cfg.tau2 = Some(340.0);
    cfg.em.compute_se = false;
    let base = fit_dataset(&cfg, &d).unwrap();
    let mut cfg_c = cfg.clone();
    cfg_c.tau1 *= c;
    cfg_c.tau2 = Some(340.0 * c);
    let other = fit_dataset(&cfg_c, &stretched).unwrap();
    let m = base.fit.num_events as f64;
    assert!((other.mll_original_scale - (base.mll_original_scale - m * c.ln())).abs() < 1e-6);
    assert!((other.fit.mll - base.fit.mll).abs() < 1e-6);
}

#[test]
fn embedded_config_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_dataset(&sample(100, 5), &path).unwrap();
    let mut cfg = RunConfig::new(path, FamilyKind::Weibull, 240.0);
    cfg.tau2 = Some(340.0);
    let report = run_fit(&cfg).unwrap();

    let json = serde_json::to_string(&report).unwrap();
    let parsed: FitReport = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, report);

    let again = run_fit(&parsed.config).unwrap();
    assert!((again.fit.mll - report.fit.mll).abs() < 1e-9);
    for (a, b) in again.fit.estimates.iter().zip(&report.fit.estimates) {
        assert!((a - b).abs() < 1e-9);
    }
    let (sa, sb) = (again.ks.unwrap(), report.ks.unwrap());
    assert!((sa.distance - sb.distance).abs() < 1e-9);
}

#[test]
fn risk_profile_curves_separate_after_the_stress_change() {
    let cfg = SimConfig {
        covariate_scale: CovariateScale::Raw,
        beta: vec![-2.357398, -0.166667, 0.902439, -0.008696],
        ..SimConfig::reference_weibull(1, 1, 0)
    };
    let names = cfg.covariate_names();
    let model = CrmModel::new(
        FamilyKind::Weibull,
        FamilyParams::new(2.6, 1.8, 0.22, 1.14),
        cfg.model_schedule().unwrap(),
    )
    .unwrap();
    let cure = Cure::Logistic(CureModel::new(cfg.beta.clone(), names.clone()).unwrap());
    let text = "name,BF,VO2,Age\nlow,5.9,6.0,21\nmedium,17.1,3.2,34\nhigh,29.9,1.9,43\n";
    let profiles = read_profiles(text.as_bytes(), &names).unwrap();
    let times: Vec<f64> = (0..=120).map(|i| 5.0 * i as f64).collect();
    let mut buf = Vec::new();
    write_curves(&model, &cure, &profiles, &times, 240.0, &mut buf).unwrap();
    let (header, rows) = parse_columns(&buf);
    assert_eq!(header, ["time", "low", "medium", "high"]);
    let spread = |r: &Vec<f64>| {
        r[1..].iter().cloned().fold(f64::MIN, f64::max) - r[1..].iter().cloned().fold(f64::MAX, f64::min)
    };
    // before the change the spread is (p_low - p_high)(1 - S0(t)), small while S0 is near 1
    for r in rows.iter().filter(|r| r[0] <= 100.0) {
        assert!(spread(r) <= 0.02, "t = {}", r[0]);
    }
    let at_change = rows.iter().find(|r| r[0] == 240.0).unwrap();
    let last = rows.last().unwrap();
    assert!(spread(at_change) < spread(last) / 3.0);
    assert!(last[1] > last[2] && last[2] > last[3]);
}
