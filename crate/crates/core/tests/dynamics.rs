use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safectl_core::dynamics::{DynamicsModel, SystemId};

fn central_differences(model: &DynamicsModel, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = 1e-6;
    let n = x.len();
    let k = u.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, k);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let d = (model.eval(&xp, u).unwrap() - model.eval(&xm, u).unwrap()) / (2.0 * h);
        a.set_column(j, &d);
    }
    for j in 0..k {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let d = (model.eval(x, &up).unwrap() - model.eval(x, &um).unwrap()) / (2.0 * h);
        b.set_column(j, &d);
    }
    (a, b)
}

fn max_rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(a, f)| (a - f).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn cartpole_energy(x: &DVector<f64>) -> f64 {
    let (mc, mp, l, g) = (1.0, 0.1, 0.5, 9.8);
    let (xd, th, thd) = (x[1], x[2], x[3]);
    0.5 * (mc + mp) * xd * xd + mp * l * xd * thd * th.cos() + (2.0 / 3.0) * mp * l * l * thd * thd + mp * g * l * th.cos()
}

fn state_strategy(system: SystemId) -> BoxedStrategy<(Vec<f64>, Vec<f64>)> {
    match system {
        SystemId::CartPole => (
            prop::collection::vec(-3.0..3.0f64, 4),
            prop::collection::vec(-10.0..10.0f64, 1),
        )
            .boxed(),
        SystemId::Quad1D => (
            prop::collection::vec(-3.0..3.0f64, 2),
            prop::collection::vec(0.0..0.6f64, 1),
        )
            .boxed(),
        SystemId::Quad2D => (
            prop::collection::vec(-1.5..1.5f64, 6),
            prop::collection::vec(0.0..0.3f64, 2),
        )
            .boxed(),
    }
}

fn check_jacobian(system: SystemId, x: Vec<f64>, u: Vec<f64>) -> Result<(), TestCaseError> {
    let model = DynamicsModel::default_for(system);
    let x = DVector::from_vec(x);
    let u = DVector::from_vec(u);
    let (a, b) = model.jacobians(&x, &u).unwrap();
    let (fa, fb) = central_differences(&model, &x, &u);
    prop_assert!(max_rel_err(&a, &fa) <= 1e-6, "A mismatch {}", max_rel_err(&a, &fa));
    prop_assert!(max_rel_err(&b, &fb) <= 1e-6, "B mismatch {}", max_rel_err(&b, &fb));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cartpole_jacobians_match_finite_differences((x, u) in state_strategy(SystemId::CartPole)) {
        check_jacobian(SystemId::CartPole, x, u)?;
    }

    #[test]
    fn quad1d_jacobians_match_finite_differences((x, u) in state_strategy(SystemId::Quad1D)) {
        check_jacobian(SystemId::Quad1D, x, u)?;
    }

    #[test]
    fn quad2d_jacobians_match_finite_differences((x, u) in state_strategy(SystemId::Quad2D)) {
        check_jacobian(SystemId::Quad2D, x, u)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quad2d_mirror_symmetry(
        (x, u) in state_strategy(SystemId::Quad2D),
        steps in 1usize..50,
    ) {
        let model = DynamicsModel::default_for(SystemId::Quad2D);
        let mirror_x = |s: &DVector<f64>| DVector::from_vec(vec![-s[0], -s[1], s[2], s[3], -s[4], -s[5]]);
        let mut a = DVector::from_vec(x);
        let mut b = mirror_x(&a);
        let ua = DVector::from_vec(u.clone());
        let ub = DVector::from_vec(vec![u[1], u[0]]);
        for _ in 0..steps {
            a = model.rk4_step(&a, &ua, 1e-3, None).unwrap();
            b = model.rk4_step(&b, &ub, 1e-3, None).unwrap();
            prop_assert_eq!(mirror_x(&a), b.clone());
        }
    }

    #[test]
    fn rk4_sensitivity_matches_finite_differences(
        (x, u) in state_strategy(SystemId::CartPole),
        substeps in 1usize..4,
    ) {
        let model = DynamicsModel::default_for(SystemId::CartPole);
        let x = DVector::from_vec(x);
        let u = DVector::from_vec(u);
        let dt = 0.02;
        let sens = model.rk4_sensitivity(&x, &u, dt, substeps).unwrap();
        let step = |x: &DVector<f64>, u: &DVector<f64>| {
            let mut s = x.clone();
            for _ in 0..substeps {
                s = model.rk4_step(&s, u, dt / substeps as f64, None).unwrap();
            }
            s
        };
        prop_assert!((step(&x, &u) - &sens.x_next).amax() < 1e-12);
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (step(&xp, &u) - step(&xm, &u)) / (2.0 * h);
            for i in 0..4 {
                prop_assert!((col[i] - sens.fx[(i, j)]).abs() <= 1e-6 * sens.fx[(i, j)].abs().max(1.0));
            }
        }
        let mut up = u.clone();
        let mut um = u.clone();
        up[0] += h;
        um[0] -= h;
        let col = (step(&x, &up) - step(&x, &um)) / (2.0 * h);
        for i in 0..4 {
            prop_assert!((col[i] - sens.fu[(i, 0)]).abs() <= 1e-6 * sens.fu[(i, 0)].abs().max(1.0));
        }
    }
}

#[test]
fn passive_cartpole_conserves_energy() {
    let model = DynamicsModel::default_for(SystemId::CartPole);
    let mut x = DVector::from_vec(vec![0.0, 0.0, 0.2, 0.0]);
    let u = DVector::zeros(1);
    let e0 = cartpole_energy(&x);
    let mut drift: f64 = 0.0;
    for _ in 0..10_000 {
        x = model.rk4_step(&x, &u, 1e-3, None).unwrap();
        drift = drift.max((cartpole_energy(&x) - e0).abs() / e0.abs());
    }
    assert!(drift <= 1e-6, "relative energy drift {drift}");
}

#[test]
fn rk4_is_fourth_order_on_quad2d() {
    let model = DynamicsModel::default_for(SystemId::Quad2D);
    let x0 = DVector::from_vec(vec![0.1, 0.5, 1.0, -0.2, 0.3, 2.0]);
    let u = DVector::from_vec(vec![0.12, 0.15]);
    let integrate = |dt: f64, n: usize| {
        let mut x = x0.clone();
        for _ in 0..n {
            x = model.rk4_step(&x, &u, dt, None).unwrap();
        }
        x
    };
    let horizon = 0.05;
    let hs: Vec<f64> = vec![0.05, 0.025, 0.0125, 0.00625];
    let reference = integrate(horizon / 640.0, 640);
    let errs: Vec<f64> = hs
        .iter()
        .map(|&h| (integrate(h, (horizon / h).round() as usize) - &reference).norm())
        .collect();
    // Least-squares slope of log(err) against log(h).
    let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope - 4.0).abs() <= 0.3, "slope {slope}, errors {errs:?}");
}

#[test]
fn linearization_error_is_second_order() {
    for system in [SystemId::CartPole, SystemId::Quad1D, SystemId::Quad2D] {
        let model = DynamicsModel::default_for(system);
        let n = system.n_x();
        // Equilibria: any position with zero velocity (and zero angles).
        let mut x_ref = DVector::zeros(n);
        x_ref[0] = 0.4;
        let u_ref = model.equilibrium_input();
        let dt = 0.02;
        let lin = model.linearize_discrete(&x_ref, &u_ref, dt).unwrap();
        let dir = DVector::from_fn(n, |i, _| (i as f64 * 1.7 + 0.3).cos()).normalize();
        let err_at = |scale: f64| {
            let x = &x_ref + &dir * scale;
            let mut truth = x.clone();
            for _ in 0..20 {
                truth = model.rk4_step(&truth, &u_ref, dt / 20.0, None).unwrap();
            }
            (truth - lin.predict(&x, &u_ref)).norm()
        };
        let (e1, e2) = (err_at(1e-3), err_at(5e-4));
        if system == SystemId::Quad1D {
            // Linear model: only integrator round-off remains.
            assert!(e1 < 1e-13, "{e1}");
            continue;
        }
        let ratio = e1 / e2;
        assert!(ratio > 3.5, "{system:?}: ratio {ratio}");
    }
}
