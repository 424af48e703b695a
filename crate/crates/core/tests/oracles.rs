//! Estimators and samplers checked against independent brute-force versions.

use crm_cure::em::{m_step_beta, m_step_theta, weighted_logistic_loglik, BetaOptions, EmConfig};
use crm_cure::likelihood::{g2, partition, pseudo_loglik, EmWeights};
use crm_cure::simulation::{sample_susceptible_time, simulate_dataset, SimConfig};
use crm_cure::{log_likelihood, CrmModel, Cure, CureModel, FamilyKind, FamilyParams, StressSchedule, SubjectRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Weibull cumulative hazard with the linear bridge, written out by hand.
fn weibull_crm_cum_hazard(theta: &FamilyParams, tau1: f64, tau2: f64, t: f64) -> f64 {
    let (a1, l1) = (theta.seg1.alpha, theta.seg1.lambda);
    let (a2, l2) = (theta.seg2.alpha, theta.seg2.lambda);
    let h1 = |x: f64| a1 * l1 * x.powf(a1 - 1.0);
    let h3 = |x: f64| a2 * l2 * x.powf(a2 - 1.0);
    let c1 = |x: f64| l1 * x.powf(a1);
    let c3 = |x: f64| l2 * x.powf(a2);
    if t <= tau1 {
        return c1(t);
    }
    let slope = (h3(tau2) - h1(tau1)) / (tau2 - tau1);
    let bridge = |x: f64| h1(tau1) * (x - tau1) + 0.5 * slope * (x - tau1).powi(2);
    if t < tau2 {
        return c1(tau1) + bridge(t);
    }
    c1(tau1) + bridge(tau2) + c3(t) - c3(tau2)
}

fn bisect(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn two_sample_ks(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn sampler_matches_bisection_sampler() {
    let theta = FamilyParams::new(2.6, 1.8, 0.22, 1.14);
    let model = CrmModel::new(FamilyKind::Weibull, theta, StressSchedule::new(1.0, 1.4, None).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 5000;
    let mut ours: Vec<f64> = (0..n)
        .map(|_| sample_susceptible_time(&model, rng.sample(rand::distr::Open01)).unwrap())
        .collect();
    let mut oracle: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.sample(rand::distr::Open01);
            bisect(|t| weibull_crm_cum_hazard(&theta, 1.0, 1.4, t), -(-u).ln_1p())
        })
        .collect();
    let d = two_sample_ks(&mut ours, &mut oracle);
    let critical = 1.628 * (2.0 / n as f64).sqrt();
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn hand_written_cum_hazard_agrees() {
    let theta = FamilyParams::new(1.7, 0.8, 0.5, 2.0);
    let model = CrmModel::new(FamilyKind::Weibull, theta, StressSchedule::new(1.0, 1.3, None).unwrap()).unwrap();
    for t in [0.2, 1.0, 1.1, 1.3, 2.5] {
        let want = weibull_crm_cum_hazard(&theta, 1.0, 1.3, t);
        assert!((model.cum_hazard(t).unwrap() - want).abs() < 1e-12 * want.max(1.0));
    }
}

fn sample_records(seed: u64) -> (Vec<SubjectRecord>, StressSchedule) {
    let mut cfg = SimConfig::reference_weibull(120, 1, seed);
    cfg.covariate_ranges.truncate(1);
    cfg.beta.truncate(2);
    let d = simulate_dataset(&cfg, 0).unwrap().rescaled(cfg.scale());
    (d.records, cfg.model_schedule().unwrap())
}

/// Compass search in log space from several starts.
fn compass_max(f: impl Fn(&[f64]) -> f64, starts: &[Vec<f64>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for start in starts {
        let mut x = start.clone();
        let mut fx = f(&x);
        let mut step = 0.5;
        while step > 1e-9 {
            let mut moved = false;
            for k in 0..x.len() {
                for sign in [1.0, -1.0] {
                    let mut y = x.clone();
                    y[k] += sign * step;
                    let fy = f(&y);
                    if fy > fx {
                        x = y;
                        fx = fy;
                        moved = true;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        best = best.max(fx);
    }
    best
}

#[test]
fn theta_m_step_is_not_beaten_by_compass_search() {
    let (records, sched) = sample_records(5);
    let kind = FamilyKind::Weibull;
    let truth = FamilyParams::new(2.6, 1.8, 0.22, 1.14);
    let cure = Cure::Constant { p: 0.15 };
    let part = partition(&records, &sched);
    let model = CrmModel::new(kind, truth, sched).unwrap();
    let weights = EmWeights::compute(&model, &cure, &records, &part).unwrap();
    let objective = |x: &[f64]| {
        let th = FamilyParams::new(x[0].exp(), x[1].exp(), x[2].exp(), x[3].exp());
        CrmModel::new(kind, th, sched)
            .and_then(|m| g2(&m, &records, &part, &weights))
            .unwrap_or(f64::NEG_INFINITY)
    };
    let ours = m_step_theta(&weights, &records, &sched, kind, &truth, &EmConfig::default()).unwrap();
    let ours_value = objective(&[
        ours.seg1.alpha.ln(),
        ours.seg2.alpha.ln(),
        ours.seg1.lambda.ln(),
        ours.seg2.lambda.ln(),
    ]);
    let starts = vec![vec![0.0; 4], vec![1.0, 0.5, -1.5, 0.1], vec![0.5, 0.0, -0.5, -0.5]];
    let brute = compass_max(objective, &starts);
    assert!(ours_value >= brute - 1e-7, "m-step {ours_value} vs compass {brute}");
}

#[test]
fn beta_m_step_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z: Vec<Vec<f64>> = (0..150).map(|_| vec![1.0, rng.random_range(0.0..1.0)]).collect();
    let y: Vec<f64> = z
        .iter()
        .map(|zi| {
            let p = 1.0 / (1.0 + (-(-1.0 + 2.0 * zi[1])).exp());
            if rng.random_bool(p) {
                rng.random_range(0.5..1.0)
            } else {
                rng.random_range(0.0..0.3)
            }
        })
        .collect();
    let beta = m_step_beta(&z, &y, &[0.0, 0.0], &BetaOptions::default()).unwrap();
    let ours = weighted_logistic_loglik(&z, &y, &beta);
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=400 {
        for j in 0..=400 {
            let b = [-4.0 + 0.02 * i as f64, -4.0 + 0.02 * j as f64];
            let v = weighted_logistic_loglik(&z, &y, &b);
            if v > best.0 {
                best = (v, b[0], b[1]);
            }
        }
    }
    assert!(ours >= best.0 - 1e-12);
    assert!((beta[0] - best.1).abs() < 0.02 && (beta[1] - best.2).abs() < 0.02);
}

#[test]
fn pseudo_loglik_minorizes_log_likelihood() {
    // ln L(x) - Q(x | x_k) >= ln L(x_k) - Q(x_k | x_k) for every x
    let (records, sched) = sample_records(13);
    let names = vec!["BF".to_string()];
    let kind = FamilyKind::Weibull;
    let theta_k = FamilyParams::new(2.0, 1.5, 0.3, 1.0);
    let cure_k = Cure::Logistic(CureModel::new(vec![-1.0, -2.0], names.clone()).unwrap());
    let gap = |theta: &FamilyParams, cure: &Cure| {
        let ll = log_likelihood(theta, cure, &records, &sched, kind).unwrap();
        ll - pseudo_loglik(theta, cure, &theta_k, &cure_k, &records, &sched, kind)
            .unwrap()
            .total()
    };
    let at_k = gap(&theta_k, &cure_k);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let th = FamilyParams::new(
            rng.random_range(0.5..4.0),
            rng.random_range(0.5..4.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.2..3.0),
        );
        let cure = Cure::Logistic(
            CureModel::new(
                vec![rng.random_range(-3.0..1.0), rng.random_range(-5.0..5.0)],
                names.clone(),
            )
            .unwrap(),
        );
        assert!(gap(&th, &cure) >= at_k - 1e-9);
    }
}
