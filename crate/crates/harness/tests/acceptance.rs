//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! The process exits 0 so a known failure does not mask the rest of the
//! workspace tests; set `SAFECTL_ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use safectl_core::constraints::ConstraintSet;
use safectl_core::controllers::{ilqr_solve, lqr_synthesize, Controller, IlqrSettings, LqrMode, MpcConfig, MpcController, MpcMode};
use safectl_core::disturbances::{SeedPlan, Stream};
use safectl_core::dynamics::{DynamicsModel, SystemId};
use safectl_core::envs::{stabilization_task, Env, InputBounds, TaskSpec};
use safectl_core::numopt::{care_residual, dare_residual, solve_care, solve_dare};
use safectl_core::safefilters::residual_target;
use safectl_harness::build::{env_config, BuildContext};
use safectl_harness::{
    benchmark_throughput, cli_main, collect_transitions, compute_metrics, load_config, parse_config, robustness_sweep,
    run_episode, run_experiment, spearman, train_gp, ExperimentConfig, SweepAxis,
};

type Outcome = Result<String, String>;

const SYSTEMS: [SystemId; 3] = [SystemId::CartPole, SystemId::Quad1D, SystemId::Quad2D];
const DT: f64 = 0.02;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn shipped(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config(&path, &overrides).unwrap()
}

/// Uniform draw on `[lo, hi)` from the counter-based generator.
struct Draws {
    plan: SeedPlan,
    counter: u64,
}

impl Draws {
    fn new(seed: u64) -> Self {
        Self { plan: SeedPlan::new(seed), counter: 0 }
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        self.counter += 1;
        lo + (hi - lo) * self.plan.uniform(0, self.counter, Stream::Disturbance(0), 0, 0)
    }

    fn vector(&mut self, len: usize, lo: f64, hi: f64) -> DVector<f64> {
        DVector::from_fn(len, |_, _| self.range(lo, hi))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.range(-1.0, 1.0))
    }
}

fn central_differences(model: &DynamicsModel, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = 1e-6;
    let column = |dx: &DVector<f64>, du: &DVector<f64>| {
        (model.eval(&(x + dx), &(u + du)).unwrap() - model.eval(&(x - dx), &(u - du)).unwrap()) / (2.0 * h)
    };
    let (n, k) = (x.len(), u.len());
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, k);
    for j in 0..n {
        let mut dx = DVector::zeros(n);
        dx[j] = h;
        a.set_column(j, &column(&dx, &DVector::zeros(k)));
    }
    for j in 0..k {
        let mut du = DVector::zeros(k);
        du[j] = h;
        b.set_column(j, &column(&DVector::zeros(n), &du));
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

fn jacobians() -> Outcome {
    let start = Instant::now();
    let mut draws = Draws::new(1);
    let mut worst = 0.0f64;
    for system in SYSTEMS {
        let model = DynamicsModel::default_for(system);
        let (state_range, input_range) = match system {
            SystemId::CartPole => (3.0, (-10.0, 10.0)),
            SystemId::Quad1D => (3.0, (0.0, 0.6)),
            SystemId::Quad2D => (1.5, (0.0, 0.3)),
        };
        for _ in 0..1000 {
            let x = draws.vector(system.n_x(), -state_range, state_range);
            let u = draws.vector(system.n_u(), input_range.0, input_range.1);
            let (a, b) = model.jacobians(&x, &u).unwrap();
            let (fa, fb) = central_differences(&model, &x, &u);
            worst = worst.max(max_rel_err(&a, &fa)).max(max_rel_err(&b, &fb));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-6 && secs < 5.0,
        format!("3000 points, worst relative error {worst:.2e}, {secs:.2} s"),
    )
}

fn cartpole_energy(model: &DynamicsModel, x: &DVector<f64>) -> f64 {
    let p = model.params();
    let (mc, mp, l, g) = (p.get("m_c").unwrap(), p.get("m_p").unwrap(), p.get("l").unwrap(), p.get("g").unwrap());
    let (v, th, w) = (x[1], x[2], x[3]);
    0.5 * (mc + mp) * v * v + mp * l * v * w * th.cos() + (2.0 / 3.0) * mp * l * l * w * w + mp * g * l * th.cos()
}

fn energy() -> Outcome {
    let model = DynamicsModel::default_for(SystemId::CartPole);
    let mut x = DVector::from_vec(vec![0.0, 0.0, 0.2, 0.0]);
    let u = DVector::zeros(1);
    let e0 = cartpole_energy(&model, &x);
    let mut drift = 0.0f64;
    for _ in 0..10_000 {
        x = model.rk4_step(&x, &u, 1e-3, None).unwrap();
        drift = drift.max((cartpole_energy(&model, &x) - e0).abs() / e0.abs());
    }
    ensure(drift <= 1e-6, format!("max relative drift {drift:.2e} over 10 s"))
}

fn controllability_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (n, k) = (a.nrows(), b.ncols());
    let mut ctrb = DMatrix::zeros(n, n * k);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * k), (n, k)).copy_from(&block);
        block = a * block;
    }
    ctrb.singular_values().min()
}

fn demo_task(system: SystemId, steps: usize) -> (DynamicsModel, TaskSpec) {
    let model = DynamicsModel::default_for(system);
    let n = system.n_x();
    let mut goal = DVector::zeros(n);
    goal[0] = 0.25;
    if system == SystemId::Quad2D {
        goal[2] = 1.0;
    }
    let q = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + 0.5 * i as f64 } else { 0.0 });
    let r = DMatrix::identity(system.n_u(), system.n_u()) * 0.3;
    let task = stabilization_task(&model, goal, q, r, steps);
    (model, task)
}

fn finite_horizon_lqr_cost(model: &DynamicsModel, task: &TaskSpec, x0: &DVector<f64>, horizon: usize) -> f64 {
    let goal = task.x_ref_at(0);
    let lin = model.linearize_discrete(goal, &model.equilibrium_input(), DT).unwrap();
    let (a, b) = (&lin.ad, &lin.bd);
    let mut p = task.q.clone();
    for _ in 0..horizon {
        let s = &task.r + b.transpose() * &p * b;
        let k = s.try_inverse().unwrap() * b.transpose() * &p * a;
        p = &task.q + a.transpose() * &p * a - a.transpose() * &p * b * k;
    }
    let e = x0 - goal;
    0.5 * e.dot(&(&p * &e))
}

fn optimal_control() -> Outcome {
    let mut draws = Draws::new(3);
    let mut residual = 0.0f64;
    let mut cases = 0;
    for system in SYSTEMS {
        let (model, task) = demo_task(system, 200);
        let (a, b) = model.jacobians(task.x_ref_at(0), &model.equilibrium_input()).unwrap();
        let care = solve_care(&a, &b, &task.q, &task.r).map_err(|e| format!("{system:?} CARE: {e}"))?;
        residual = residual.max(care_residual(&a, &b, &task.q, &task.r, &care.p).unwrap());
        let lin = model.linearize_discrete(task.x_ref_at(0), &model.equilibrium_input(), DT).unwrap();
        let dare = solve_dare(&lin.ad, &lin.bd, &task.q, &task.r).map_err(|e| format!("{system:?} DARE: {e}"))?;
        residual = residual.max(dare_residual(&lin.ad, &lin.bd, &task.q, &task.r, &dare.p).unwrap());
        cases += 2;
    }
    while cases < 206 {
        let n = 1 + (draws.range(0.0, 4.0) as usize);
        let k = 1 + (draws.range(0.0, 2.0) as usize);
        let (a, b, mq, mr) = (draws.matrix(n, n), draws.matrix(n, k), draws.matrix(n, n), draws.matrix(k, k));
        if controllability_margin(&a, &b) < 0.05 {
            continue;
        }
        let q = &mq * mq.transpose() + DMatrix::identity(n, n) * 0.1;
        let r = &mr * mr.transpose() + DMatrix::identity(k, k) * 0.5;
        let care = solve_care(&a, &b, &q, &r).map_err(|e| format!("random CARE: {e}"))?;
        residual = residual.max(care_residual(&a, &b, &q, &r, &care.p).unwrap());
        let a = a * 1.2;
        let dare = solve_dare(&a, &b, &q, &r).map_err(|e| format!("random DARE: {e}"))?;
        residual = residual.max(dare_residual(&a, &b, &q, &r, &dare.p).unwrap());
        cases += 2;
    }

    let mut input_gap = 0.0f64;
    for system in SYSTEMS {
        let (model, task) = demo_task(system, 200);
        let lqr = lqr_synthesize(&model, &task, DT, LqrMode::Discrete).unwrap();
        let m = system.n_u();
        let bounds = InputBounds {
            lower: DVector::from_element(m, f64::NEG_INFINITY),
            upper: DVector::from_element(m, f64::INFINITY),
        };
        for horizon in [1, 5, 25] {
            let mut cfg = MpcConfig::new(MpcMode::Linear, &task, ConstraintSet::empty(system.n_x(), m), bounds.clone());
            cfg.horizon = horizon;
            for _ in 0..10 {
                let mut mpc = MpcController::new(cfg.clone(), model.clone(), task.clone(), DT).unwrap();
                let x = task.x_ref_at(0) + draws.vector(system.n_x(), -0.2, 0.2);
                let gap = (mpc.act(&x, 0).unwrap() - lqr.input(&x, 0)).amax();
                input_gap = input_gap.max(gap);
            }
        }
    }

    let (model, task) = demo_task(SystemId::Quad1D, 100);
    let mut cost_gap = 0.0f64;
    for x0 in [[0.0, 0.0], [1.0, -0.5], [-0.3, 0.8]] {
        let x0 = DVector::from_row_slice(&x0);
        let sol = ilqr_solve(&model, &task, &x0, 0, 100, DT, &IlqrSettings::default()).unwrap();
        cost_gap = cost_gap.max((sol.cost - finite_horizon_lqr_cost(&model, &task, &x0, 100)).abs());
    }
    ensure(
        residual <= 1e-9 && input_gap <= 1e-6 && cost_gap <= 1e-8,
        format!(
            "Riccati residual {residual:.2e} over {cases} cases, MPC-LQR input gap {input_gap:.2e}, iLQR-LQR cost gap {cost_gap:.2e}"
        ),
    )
}

fn stabilization() -> Outcome {
    let cfg = shipped("cartpole_lqr.yaml", &[]);
    let trace = run_episode(&cfg, cfg.seeds[0], 0).unwrap();
    let five_seconds = (5.0 / trace.dt).round() as usize;
    let at = five_seconds.min(trace.states.len() - 1);
    let norm = trace.states[at].amax();
    let wrong = shipped("cartpole_lqr_wrong_prior.yaml", &[]);
    let w = run_episode(&wrong, wrong.seeds[0], 0).unwrap();
    ensure(
        trace.states[0].as_slice() == [0.0, 0.0, 0.1, 0.0] && at == five_seconds && norm <= 1e-3 && w.completed(),
        format!(
            "|x|inf {norm:.2e} at t = {:.2} s; 1.5x prior: {} of {} steps, terminated {}",
            at as f64 * trace.dt,
            w.steps(),
            w.task_steps,
            w.terminated
        ),
    )
}

fn violation_fraction(cfg: &ExperimentConfig) -> (f64, bool) {
    let task = env_config(cfg).unwrap().task;
    let reports: Vec<_> = run_experiment(cfg, None)
        .unwrap()
        .iter()
        .map(|t| compute_metrics(t, &task))
        .collect();
    let worst = reports.iter().map(|r| r.violation_fraction).fold(0.0, f64::max);
    (worst, reports.iter().all(|r| r.completed))
}

fn impossible_task() -> Outcome {
    let (nmpc, nmpc_done) = violation_fraction(&shipped("quad2d_impossible_nmpc.yaml", &[]));
    let (gpmpc, gp_done) = violation_fraction(&shipped("quad2d_impossible_nmpc.yaml", &["controller.type=gpmpc"]));
    let (lqr, _) = violation_fraction(&shipped("quad2d_impossible_lqr.yaml", &[]));
    ensure(
        nmpc <= 1e-8 && gpmpc <= 1e-8 && nmpc_done && gp_done && lqr > 0.0,
        format!("violation fraction NMPC {nmpc}, GP-MPC {gpmpc}, LQR {lqr:.3}"),
    )
}

/// Smallest barrier value `1 - v^2` over every state of every episode.
fn min_barrier(cfg: &ExperimentConfig) -> (f64, usize, f64) {
    let traces = run_experiment(cfg, None).unwrap();
    let mut worst = f64::INFINITY;
    let mut violating = 0;
    let mut initial = f64::INFINITY;
    for t in &traces {
        let h = t.states.iter().map(|x| 1.0 - x[1] * x[1]).fold(f64::INFINITY, f64::min);
        initial = initial.min(1.0 - t.states[0][1] * t.states[0][1]);
        worst = worst.min(h);
        if h < -1e-6 {
            violating += 1;
        }
    }
    (worst, violating, initial)
}

fn barrier_invariance() -> Outcome {
    let mut filtered = shipped("quad1d_cbf.yaml", &[]);
    filtered.seeds = (0..100).collect();
    let mut unfiltered = filtered.clone();
    unfiltered.filter.kind = safectl_harness::config::FilterKind::None;
    let (h_min, bad, h0) = min_barrier(&filtered);
    let (raw_min, raw_bad, _) = min_barrier(&unfiltered);
    ensure(
        h0 >= 0.0 && h_min >= -1e-6 && raw_bad >= 1,
        format!("100 seeds: filtered min h {h_min:.2e} ({bad} violating), unfiltered min h {raw_min:.2} ({raw_bad} violating)"),
    )
}

fn gp_learning() -> Outcome {
    let cfg = shipped("quad1d_gpmpc.yaml", &[]);
    let mut env = Env::new(env_config(&cfg).unwrap()).unwrap();
    let (_, info) = env.reset(0, 0).unwrap();
    let ctx = BuildContext::from_reset(&info);
    let training_seconds = cfg.controller.gp.train_episodes as f64 * cfg.task.steps as f64 * ctx.dt;
    let gp = train_gp(&cfg, &ctx, 0).unwrap();
    let held_out = collect_transitions(&cfg, 1, 1).unwrap();
    let (mut raw, mut corrected) = (0.0, 0.0);
    for t in &held_out {
        let (z, r) = residual_target(&ctx.prior, ctx.dt, cfg.controller.substeps, &t.x, &t.u, &t.x_next).unwrap();
        raw += r.norm_squared();
        corrected += (&r - gp.predict(&z).0).norm_squared();
    }
    let reduction = 1.0 - (corrected / raw).sqrt();

    let task = env_config(&cfg).unwrap().task;
    let mean_rmse = |c: &ExperimentConfig| {
        let traces = run_experiment(c, None).unwrap();
        traces.iter().map(|t| compute_metrics(t, &task).rmse).sum::<f64>() / traces.len() as f64
    };
    let gp_rmse = mean_rmse(&cfg);
    let lmpc_rmse = mean_rmse(&shipped("quad1d_gpmpc.yaml", &["controller.type=lmpc"]));
    ensure(
        training_seconds <= 150.0 && reduction >= 0.5 && gp_rmse <= lmpc_rmse,
        format!(
            "{training_seconds} s of data, held-out one-step RMSE {:.3e} -> {:.3e} ({:.2}% lower), tracking RMSE GP-MPC {gp_rmse:.4} vs LMPC {lmpc_rmse:.4}",
            (raw / held_out.len() as f64).sqrt(),
            (corrected / held_out.len() as f64).sqrt(),
            reduction * 100.0
        ),
    )
}

fn sweeps() -> Outcome {
    let cfg = shipped("cartpole_sweep.yaml", &[]);
    let start = Instant::now();
    let lengths = vec![0.5, 0.75, 1.0, 1.25, 1.5];
    let noise = vec![0.0, 0.5, 1.0, 1.5, 2.0];
    let pole = robustness_sweep(&cfg, &SweepAxis::PoleLength(lengths.clone()), &cfg.seeds, None).unwrap();
    let act = robustness_sweep(&cfg, &SweepAxis::ActionNoise(noise.clone()), &cfg.seeds, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pole_rmse = pole.mean_rmse();
    let noise_rmse = act.mean_rmse();
    let argmin = (0..pole_rmse.len())
        .min_by(|&a, &b| pole_rmse[a].total_cmp(&pole_rmse[b]))
        .unwrap();
    let nominal = lengths.iter().position(|&v| v == 1.0).unwrap();
    let rho = spearman(&noise, &noise_rmse);
    let shape_ok = argmin.abs_diff(nominal) <= 1;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    ensure(
        cfg.seeds.len() == 10 && shape_ok && rho > 0.0 && secs < 600.0,
        format!(
            "pole-length RMSE [{}] minimum at {}x nominal ({}); noise RMSE [{}] Spearman {rho:.3}; {secs:.1} s",
            fmt(&pole_rmse),
            lengths[argmin],
            if shape_ok { "within one cell" } else { "more than one cell from nominal" },
            fmt(&noise_rmse)
        ),
    )
}

fn throughput() -> Outcome {
    let closed = shipped("cartpole_lqr.yaml", &[]);
    let open = parse_config("system: quad2d\ncontroller: {type: open, zero_input: true}\n", &[]).unwrap();
    let a = benchmark_throughput(&closed, 20.0, true).unwrap();
    let b = benchmark_throughput(&open, 20.0, true).unwrap();
    ensure(
        closed.physics_hz == 1000 && a.realtime_factor >= 10.0 && b.realtime_factor >= 10.0,
        format!(
            "realtime factor with trace logging at 1000 Hz: cart-pole LQR {:.0}x, open-loop 2D quadrotor {:.0}x",
            a.realtime_factor, b.realtime_factor
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/quad1d_cbf.yaml");
    let mut outputs = Vec::new();
    for (tag, workers) in [("a", "1"), ("b", "1"), ("c", "8")] {
        let out = root.path().join(tag);
        let code = cli_main([
            "safectl",
            "run",
            config.to_str().unwrap(),
            "--workers",
            workers,
            "--override",
            "action_noise_std=0.05",
            "--override",
            "episodes=2",
            "--out",
            out.to_str().unwrap(),
        ]);
        if code != 0 {
            return Err(format!("run exited with {code}"));
        }
        outputs.push(csv_files(&out.join("quad1d_cbf")));
    }
    let count = outputs[0].len();
    ensure(
        count == 10 && outputs[0] == outputs[1] && outputs[0] == outputs[2],
        format!("{count} trace CSVs byte-identical across two runs and across 1 vs 8 workers"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("dynamics Jacobians", jacobians),
        ("energy conservation", energy),
        ("optimal-control oracles", optimal_control),
        ("cart-pole stabilization", stabilization),
        ("impossible-task constraint satisfaction", impossible_task),
        ("CBF invariance", barrier_invariance),
        ("GP learning", gp_learning),
        ("robustness sweeps", sweeps),
        ("throughput", throughput),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1)
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 && std::env::var("SAFECTL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
