use std::collections::BTreeMap;

use nalgebra::DVector;
use safectl_core::disturbances::{
    DisturbanceKind, DisturbancePlan, DisturbanceSpec, DisturbanceTarget, Distribution, RandomizationSpec, SeedPlan,
    Stream,
};
use safectl_core::dynamics::{DynamicsModel, Params, SystemId};

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
    cov / (sa * sb)
}

#[test]
fn gaussian_initial_state_has_requested_spread() {
    let spec = RandomizationSpec {
        x0: vec![Distribution::Gaussian { mean: 0.0, std: 0.3 }, Distribution::None],
        ..RandomizationSpec::default()
    };
    let nominal = DVector::from_vec(vec![1.0, 2.0]);
    let plan = SeedPlan::new(11);
    let draws: Vec<f64> = (0..100_000)
        .map(|ep| {
            let x = spec.sample_initial_state(&nominal, &plan, ep);
            assert_eq!(x[1], 2.0);
            x[0] - 1.0
        })
        .collect();
    let (_, std) = mean_std(&draws);
    assert!((std / 0.3 - 1.0).abs() <= 0.02, "std {std}");
}

#[test]
fn uniform_angle_randomization_is_centered_and_bounded() {
    let spec = RandomizationSpec {
        x0: vec![
            Distribution::None,
            Distribution::None,
            Distribution::Uniform { lo: -0.1, hi: 0.1 },
            Distribution::None,
        ],
        ..RandomizationSpec::default()
    };
    let nominal = DVector::from_vec(vec![0.0, 0.0, 0.05, 0.0]);
    let draws: Vec<f64> = (0..10_000u64)
        .map(|seed| spec.sample_initial_state(&nominal, &SeedPlan::new(seed), 0)[2])
        .collect();
    assert!(draws.iter().all(|t| (t - 0.05).abs() <= 0.1));
    let (mean, _) = mean_std(&draws);
    let sigma_of_mean = 0.2 / 12f64.sqrt() / 100.0;
    assert!((mean - 0.05).abs() <= 3.0 * sigma_of_mean, "mean {mean}");
}

#[test]
fn action_white_noise_matches_sigma_and_is_uncorrelated() {
    let sigma = 0.25;
    let plan = DisturbancePlan::new(vec![DisturbanceSpec {
        target: DisturbanceTarget::Action,
        kind: DisturbanceKind::WhiteNoise { std: vec![sigma] },
        channels: vec![0],
    }]);
    let seeds = SeedPlan::new(5);
    let zero = DVector::zeros(1);
    let noise: Vec<f64> = (0..100_001)
        .map(|k| plan.apply(DisturbanceTarget::Action, &zero, &seeds, 0, k)[0])
        .collect();
    let (_, std) = mean_std(&noise[..100_000]);
    assert!((std / sigma - 1.0).abs() <= 0.02, "std {std}");
    let lag = correlation(&noise[..100_000], &noise[1..]);
    assert!(lag.abs() <= 0.01, "lag-1 correlation {lag}");
    let other_episode: Vec<f64> = (0..100_000)
        .map(|k| plan.apply(DisturbanceTarget::Action, &zero, &seeds, 1, k)[0])
        .collect();
    let cross = correlation(&noise[..100_000], &other_episode);
    assert!(cross.abs() <= 0.01, "cross-episode correlation {cross}");
}

#[test]
fn distinct_streams_are_uncorrelated() {
    let plan = SeedPlan::new(99);
    let a: Vec<f64> = (0..100_000).map(|k| plan.normal(0, k, Stream::Disturbance(0), 0, 0)).collect();
    let b: Vec<f64> = (0..100_000).map(|k| plan.normal(0, k, Stream::Disturbance(1), 0, 0)).collect();
    let c: Vec<f64> = (0..100_000).map(|k| plan.normal(0, k, Stream::Disturbance(0), 1, 0)).collect();
    assert!(correlation(&a, &b).abs() <= 0.01);
    assert!(correlation(&a, &c).abs() <= 0.01);
}

#[test]
fn draws_do_not_depend_on_evaluation_order() {
    let plan = SeedPlan::new(2024);
    let forward: Vec<f64> = (0..2000).map(|k| plan.uniform(3, k, Stream::Disturbance(2), 1, 0)).collect();
    let handles: Vec<_> = (0..4)
        .map(|t| {
            std::thread::spawn(move || {
                (0..2000u64)
                    .rev()
                    .filter(|k| k % 4 == t)
                    .map(|k| (k, plan.uniform(3, k, Stream::Disturbance(2), 1, 0)))
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for h in handles {
        for (k, v) in h.join().unwrap() {
            assert_eq!(v.to_bits(), forward[k as usize].to_bits());
        }
    }
}

#[test]
fn zero_sigma_and_impulse_are_exact() {
    let seeds = SeedPlan::new(1);
    let value = DVector::from_vec(vec![0.3, -0.2]);
    let silent = DisturbancePlan::new(vec![DisturbanceSpec {
        target: DisturbanceTarget::Observation,
        kind: DisturbanceKind::WhiteNoise { std: vec![0.0, 0.0] },
        channels: vec![0, 1],
    }]);
    let impulse = DisturbancePlan::new(vec![DisturbanceSpec {
        target: DisturbanceTarget::Observation,
        kind: DisturbanceKind::Impulse {
            magnitude: vec![1.0],
            step: 7,
        },
        channels: vec![1],
    }]);
    for k in 0..20 {
        assert_eq!(silent.apply(DisturbanceTarget::Observation, &value, &seeds, 0, k), value);
        let out = impulse.apply(DisturbanceTarget::Observation, &value, &seeds, 0, k);
        if k == 7 {
            assert_eq!(out[1], 0.8);
            assert_eq!(out[0], 0.3);
        } else {
            assert_eq!(out, value);
        }
    }
}

#[test]
fn prior_scaling_and_constant_offsets() {
    let nominal = Params::default_for(SystemId::CartPole);
    let prior = DynamicsModel::new(nominal).unwrap().scaled(1.5).unwrap();
    for name in ["m_c", "m_p", "l"] {
        assert!((prior.params().get(name).unwrap() - 1.5 * nominal.get(name).unwrap()).abs() < 1e-15);
    }
    assert_eq!(prior.params().get("g"), nominal.get("g"));

    let mut params = BTreeMap::new();
    params.insert("l".to_string(), Distribution::Constant { value: 0.25 });
    let spec = RandomizationSpec {
        params,
        ..RandomizationSpec::default()
    };
    for seed in 0..5 {
        let p = spec.sample_params(&nominal, &SeedPlan::new(seed), seed).unwrap();
        assert_eq!(p.get("l"), Some(0.75));
    }
}
