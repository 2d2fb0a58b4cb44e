use safectl_harness::{benchmark_throughput, parse_config, ExperimentConfig};

fn open_loop(physics_hz: u32) -> ExperimentConfig {
    parse_config(
        &format!("system: quad2d\ncontroller: {{type: open, zero_input: true}}\nphysics_hz: {physics_hz}\n"),
        &[],
    )
    .unwrap()
}

/// Best realtime factor over interleaved repeats, one entry per variant.
fn best_of(variants: &[(ExperimentConfig, bool)], seconds: f64, repeats: usize) -> Vec<f64> {
    let mut best = vec![0.0f64; variants.len()];
    for _ in 0..repeats {
        for (b, (cfg, log)) in best.iter_mut().zip(variants) {
            let report = benchmark_throughput(cfg, seconds, *log).unwrap();
            assert_eq!(report.trace_logging, *log);
            *b = b.max(report.realtime_factor);
        }
    }
    best
}

// Timing comparisons share one test so they never compete for cores.
#[test]
fn throughput_scaling_and_logging_overhead() {
    let fast = open_loop(1000);
    let report = benchmark_throughput(&fast, 2.0, true).unwrap();
    assert!(report.simulated_seconds >= 2.0);
    assert_eq!(report.physics_steps, report.control_steps * 20);
    assert!(benchmark_throughput(&fast, 0.0, true).is_err());

    let best = best_of(&[(fast.clone(), true), (fast.clone(), false)], 60.0, 7);
    let overhead = best[1] / best[0] - 1.0;
    assert!(overhead <= 0.30, "trace logging costs {:.1}% (with {:.0}x, without {:.0}x)", overhead * 100.0, best[0], best[1]);

    let best = best_of(&[(fast, false), (open_loop(250), false)], 60.0, 3);
    let ratio = best[1] / best[0];
    // Four times fewer physics steps; per-step control work keeps it below 4.
    assert!((2.0..=8.0).contains(&ratio), "250 Hz / 1000 Hz realtime ratio {ratio}");
}
