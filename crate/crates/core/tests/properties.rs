use crm_cure::inference::lrt_for;
use crm_cure::model::population_survival;
use crm_cure::{kaplan_meier, CrmModel, Cure, FamilyKind, FamilyParams, StressSchedule, SubjectRecord, TestProblem};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = FamilyKind> {
    prop_oneof![
        Just(FamilyKind::Weibull),
        Just(FamilyKind::LinearFailureRate),
        Just(FamilyKind::GeneralizedExponential)
    ]
}

fn model() -> impl Strategy<Value = CrmModel> {
    (
        kind(),
        0.3..4.0f64,
        0.3..4.0f64,
        0.05..3.0f64,
        0.05..3.0f64,
        0.2..3.0f64,
        0.0..1.5f64,
    )
        .prop_map(|(k, a1, a2, l1, l2, tau1, delta)| {
            let theta = FamilyParams::new(a1, a2, l1, l2);
            CrmModel::new(k, theta, StressSchedule::new(tau1, tau1 + delta, None).unwrap()).unwrap()
        })
}

proptest! {
    #[test]
    fn cumulative_hazard_is_monotone(m in model(), a in 0.001..6.0f64, b in 0.001..6.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (h_lo, h_hi) = (m.cum_hazard(lo).unwrap(), m.cum_hazard(hi).unwrap());
        prop_assert!(h_lo <= h_hi * (1.0 + 1e-12) + 1e-15);
        let s = m.survival(hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(m.hazard(hi).unwrap() >= 0.0);
    }

    #[test]
    fn inverse_recovers_time(m in model(), t in 0.01..5.0f64) {
        let h = m.cum_hazard(t).unwrap();
        prop_assume!(h > 1e-10 && h < 500.0);
        let back = m.cum_hazard_inverse(h).unwrap();
        prop_assert!((back - t).abs() <= 1e-8 * t.max(1.0), "t {t} back {back}");
    }

    #[test]
    fn population_survival_stays_above_cure_fraction(m in model(), p in 0.0..0.9f64, t in 0.0..8.0f64) {
        let cure = Cure::Constant { p };
        let s = population_survival(&m, &cure, &[1.0], t).unwrap();
        prop_assert!(s >= p - 1e-15 && s <= 1.0);
        let later = population_survival(&m, &cure, &[1.0], t + 0.5).unwrap();
        prop_assert!(later <= s + 1e-15);
    }

    #[test]
    fn kaplan_meier_is_a_survival_curve(rows in prop::collection::vec((0.01..10.0f64, any::<bool>()), 1..60)) {
        let records: Vec<SubjectRecord> = rows.iter().map(|&(t, e)| SubjectRecord::plain(t, e)).collect();
        let km = kaplan_meier(&records).unwrap();
        let mut prev = 1.0;
        for &v in &km.values {
            prop_assert!((0.0..=prev + 1e-15).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn lrt_statistic_and_p_value_are_in_range(l0 in -500.0..0.0f64, d in -1.0..30.0f64, problem in 1u8..=4, s in 1usize..5) {
        let problem = TestProblem::from_number(problem).unwrap();
        let r = lrt_for(problem, FamilyKind::Weibull, l0, l0 + d, s);
        prop_assert!(r.statistic >= 0.0);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }
}
