//! Acceptance gate: ten end-to-end criteria covering oracle equivalence,
//! accuracy, complexity trend, determinism, scaling, grain tradeoff, task
//! accounting, spawn overhead, engine properties, and physics health.
//!
//! Each criterion prints exactly one `[PASS]`/`[FAIL]` line (run with
//! `cargo test --test acceptance -- --nocapture` to see them). Criteria 5
//! and 6 measure parallel behavior and are gated only on hosts with at
//! least 4 cores; elsewhere the measurement is still taken and reported.
//! Criterion 8 is report-only by design. All tests share one lock so
//! wall-clock measurements never interleave.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nbody_core::dataflow::{
    execute_force_stage, flatten, stage_task_count, wire, Accumulation, GrainConfig, StageStats,
};
use nbody_core::engine::{Engine, EngineConfig, EngineError, Task};
use nbody_core::icgen::{plummer, write_particles, PlummerConfig, SplitMix64};
use nbody_core::octree::{accel_direct, accel_from_sources, build_with_moments, interaction_list};
use nbody_core::sim::{
    diagnostics, run_simulation, simulate, Backend, IterationTiming, SimConfig,
};
use nbody_core::{ForceParams, Particle, Theta, Vec3};

fn gate() -> MutexGuard<'static, ()> {
    static GATE: OnceLock<Mutex<()>> = OnceLock::new();
    GATE.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn report(criterion: u32, ok: bool, detail: String) {
    let tag = if ok { "[PASS]" } else { "[FAIL]" };
    println!("{tag} criterion {criterion}: {detail}");
    assert!(ok, "criterion {criterion}: {detail}");
}

fn cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn plummer_n(n: usize, seed: u64) -> Vec<Particle> {
    plummer(&PlummerConfig { n, seed, ..PlummerConfig::default() }).expect("valid Plummer config")
}

/// Equal-mass particles uniform in the unit cube: the textbook setting for
/// the O(N log N) interaction-count trend.
fn uniform_cube(n: usize, seed: u64) -> Vec<Particle> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let position = Vec3::new(rng.next_unit(), rng.next_unit(), rng.next_unit());
            Particle::new(1.0 / n as f64, position, Vec3::zero())
        })
        .collect()
}

/// One dataflow force evaluation: fresh engine, flatten + wire + stage.
fn dataflow_accels(
    particles: &[Particle],
    theta: Theta,
    workers: usize,
    grain: GrainConfig,
    params: ForceParams,
) -> (Vec<Vec3>, StageStats) {
    let engine = Engine::new(EngineConfig::new(workers)).expect("nonzero workers");
    let tree = build_with_moments(particles).expect("tree builds");
    let (row, _) = flatten(&tree, &engine);
    let outputs = wire(&row, &tree, particles, theta, &engine);
    execute_force_stage(&row, outputs, particles, grain, params, &engine)
        .expect("force stage completes")
}

/// Mean per-iteration force-stage wall time, excluding the warm-up
/// iteration when more than one ran.
fn mean_force_time(timings: &[IterationTiming]) -> f64 {
    let measured = if timings.len() > 1 { &timings[1..] } else { timings };
    measured.iter().map(|t| t.force_time).sum::<f64>() / measured.len() as f64
}

#[test]
fn criterion_01_oracle_equivalence() {
    let _gate = gate();
    let start = Instant::now();
    let particles = plummer_n(256, 1);
    let params = ForceParams::default();
    let direct: Vec<Vec3> = (0..particles.len())
        .map(|i| accel_direct(&particles, i, &params).expect("nonsingular"))
        .collect();

    let mut all_equal = true;
    for workers in [1, 2, 4] {
        let (accels, _) = dataflow_accels(
            &particles,
            Theta::ZERO,
            workers,
            GrainConfig::fixed_grain(32),
            params,
        );
        let equal = accels.iter().zip(&direct).all(|(a, b)| {
            a.x.to_bits() == b.x.to_bits()
                && a.y.to_bits() == b.y.to_bits()
                && a.z.to_bits() == b.z.to_bits()
        });
        all_equal &= equal;
    }
    let elapsed = start.elapsed();
    report(
        1,
        all_equal && elapsed < Duration::from_secs(10),
        format!(
            "θ=0 dataflow accelerations bitwise-equal to the direct sum for W ∈ {{1,2,4}} \
             (N=256, {:.2}s, bound 10s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_accuracy_vs_theta() {
    let _gate = gate();
    let start = Instant::now();
    let n = 10_000;
    let sample = 500;
    let particles = plummer_n(n, 4);
    let params = ForceParams::default();
    let tree = build_with_moments(&particles).expect("tree builds");

    let indices: Vec<usize> = (0..sample).map(|k| k * n / sample).collect();
    let direct: Vec<Vec3> = indices
        .iter()
        .map(|&i| accel_direct(&particles, i, &params).expect("nonsingular"))
        .collect();

    let thetas = [0.8, 0.5, 0.3, 0.1];
    let mut medians = Vec::with_capacity(thetas.len());
    for &theta in &thetas {
        let theta = Theta::new(theta).expect("valid theta");
        let mut errors: Vec<f64> = indices
            .iter()
            .zip(&direct)
            .map(|(&i, exact)| {
                let sources = interaction_list(&tree, &particles, i, theta);
                let approx = accel_from_sources(particles[i].position, &sources, &params)
                    .expect("nonsingular");
                let diff = (approx - *exact).norm();
                if diff == 0.0 { 0.0 } else { diff / exact.norm() }
            })
            .collect();
        errors.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        medians.push(errors[errors.len() / 2]);
    }

    let strictly_decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let accurate_at_half = medians[1] < 1e-2;
    let elapsed = start.elapsed();
    report(
        2,
        strictly_decreasing && accurate_at_half && elapsed < Duration::from_secs(120),
        format!(
            "median relative force error at θ=0.5 is {:.2e} (< 1e-2) and decreases strictly \
             over θ ∈ {{0.8,0.5,0.3,0.1}}: [{:.2e}, {:.2e}, {:.2e}, {:.2e}] \
             (N=10⁴, K={sample}, {:.1}s, bound 120s)",
            medians[1],
            medians[0],
            medians[1],
            medians[2],
            medians[3],
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_interaction_count_trend() {
    let _gate = gate();
    let start = Instant::now();
    let theta = Theta::new(0.5).expect("valid theta");

    // Mean list length per N, over every particle in a uniform cube.
    let sizes = [1usize << 10, 1 << 12, 1 << 14];
    let mut ratios = Vec::with_capacity(sizes.len());
    let mut means = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let particles = uniform_cube(n, 7);
        let tree = build_with_moments(&particles).expect("tree builds");
        let total: usize = (0..n)
            .map(|i| interaction_list(&tree, &particles, i, theta).len())
            .sum();
        let mean = total as f64 / n as f64;
        means.push(mean);
        ratios.push(mean / (n as f64).ln());
    }

    // Best single constant c for L ≈ c·ln N under the max-relative-error
    // metric: the midpoint of the extreme L/ln N ratios.
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
    let c = 0.5 * (lo + hi);
    let max_dev = ratios.iter().map(|r| (r - c).abs() / c).fold(0.0f64, f64::max);

    let elapsed = start.elapsed();
    report(
        3,
        max_dev <= 0.25 && elapsed < Duration::from_secs(60),
        format!(
            "mean interaction-list length at θ=0.5 fits c·ln N with c={c:.1}, max per-point \
             deviation {:.1}% (≤ 25%) for N ∈ {{2¹⁰,2¹²,2¹⁴}}: [{:.1}, {:.1}, {:.1}] \
             ({:.1}s, bound 60s)",
            max_dev * 100.0,
            means[0],
            means[1],
            means[2],
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_04_worker_count_determinism() {
    let _gate = gate();
    let start = Instant::now();
    let dir = std::env::temp_dir().join(format!("nbody-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create scratch dir");

    let mut paths = Vec::new();
    for workers in [1usize, 8] {
        let config = SimConfig {
            steps: 10,
            workers,
            backend: Backend::Dataflow,
            theta: Theta::new(0.5).expect("valid theta"),
            grain: GrainConfig::fixed_grain(64),
            seed: 4,
            ..SimConfig::new(10_000)
        };
        let (state, _) = run_simulation(&config).expect("simulation completes");
        let path = dir.join(format!("final-w{workers}.nb"));
        write_particles(&state.particles, &path).expect("write final state");
        paths.push(path);
    }

    let bytes: Vec<Vec<u8>> =
        paths.iter().map(|p| std::fs::read(p).expect("read final state")).collect();
    let identical = bytes[0] == bytes[1];
    let elapsed = start.elapsed();
    report(
        4,
        identical && elapsed < Duration::from_secs(120),
        format!(
            "final particle files bitwise-identical for W=1 and W=8 after 10 iterations \
             (N=10⁴, deterministic mode, {:.1}s, bound 120s)",
            elapsed.as_secs_f64()
        ),
    );
}

/// Sweeps grains at one worker count and returns (best grain, its mean
/// force time) over 10 iterations of an N=10⁴ Plummer run.
fn best_grain(workers: usize, grains: &[usize], particles: &[Particle]) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for &grain in grains {
        let config = SimConfig {
            steps: 10,
            workers,
            backend: Backend::Dataflow,
            theta: Theta::new(0.5).expect("valid theta"),
            grain: GrainConfig::fixed_grain(grain),
            ..SimConfig::new(particles.len())
        };
        let (_, timings) = simulate(particles.to_vec(), &config).expect("simulation completes");
        let mean = mean_force_time(&timings);
        if best.is_none_or(|(_, t)| mean < t) {
            best = Some((grain, mean));
        }
    }
    best.expect("grain list is nonempty")
}

#[test]
fn criterion_05_worker_scaling() {
    let _gate = gate();
    let start = Instant::now();
    let particles = plummer_n(10_000, 4);
    let grains = [16, 64, 256, 1024];

    let (grain_1, time_1) = best_grain(1, &grains, &particles);
    let (grain_4, time_4) = best_grain(4, &grains, &particles);
    let ratio = time_4 / time_1;
    let elapsed = start.elapsed();

    let measured = format!(
        "best-grain force time W4/W1 = {ratio:.2} (bound 0.60; W1 best grain {grain_1} at \
         {time_1:.3}s, W4 best grain {grain_4} at {time_4:.3}s; N=10⁴, 10 iterations, \
         {:.0}s, bound 300s)",
        elapsed.as_secs_f64()
    );
    let cores = cores();
    if cores >= 4 {
        report(5, ratio <= 0.6 && elapsed < Duration::from_secs(300), measured);
    } else {
        report(
            5,
            elapsed < Duration::from_secs(300),
            format!(
                "soft gate waived — host has {cores} core(s), criterion requires ≥ 4; \
                 measured anyway: {measured}"
            ),
        );
    }
}

#[test]
fn criterion_06_grain_tradeoff() {
    let _gate = gate();
    let start = Instant::now();
    let n = 10_000;
    let particles = plummer_n(n, 4);

    let mut times = Vec::new();
    for grain in [1usize, 64, n] {
        let config = SimConfig {
            steps: 10,
            workers: 4,
            backend: Backend::Dataflow,
            theta: Theta::new(0.5).expect("valid theta"),
            grain: GrainConfig::fixed_grain(grain),
            ..SimConfig::new(n)
        };
        let (_, timings) = simulate(particles.clone(), &config).expect("simulation completes");
        times.push(mean_force_time(&timings));
    }

    let intermediate_wins = times[1] <= times[0] && times[1] <= times[2];
    let elapsed = start.elapsed();
    let measured = format!(
        "W=4 force times over grain {{1, 64, N}}: [{:.3}s, {:.3}s, {:.3}s] — intermediate ≤ \
         both extremes: {intermediate_wins} (N=10⁴, {:.0}s)",
        times[0],
        times[1],
        times[2],
        elapsed.as_secs_f64()
    );
    let cores = cores();
    if cores >= 4 {
        report(6, intermediate_wins, measured);
    } else {
        report(
            6,
            true,
            format!(
                "soft gate waived — host has {cores} core(s), criterion requires ≥ 4; \
                 measured anyway: {measured}"
            ),
        );
    }
}

#[test]
fn criterion_07_streaming_task_accounting() {
    let _gate = gate();
    let start = Instant::now();
    let mut rng = SplitMix64::new(77);
    let mut rounds = 0u32;
    let mut ok = true;

    while rounds < 40 {
        let p = 1 + (rng.next_u64() % 160) as usize;
        let workers = 1 + (rng.next_u64() % 3) as usize;
        let theta = [0.0, 0.3, 0.6, 1.0][(rng.next_u64() % 4) as usize];
        let grain = match rng.next_u64() % 3 {
            0 => GrainConfig::fixed_grain(1 + (rng.next_u64() as usize % p)),
            1 => GrainConfig::fixed_grain(p + (rng.next_u64() as usize % 8)),
            _ => GrainConfig::fixed_count(1 + (rng.next_u64() as usize % (p + 2))),
        }
        .with_accumulation(Accumulation::Streaming);

        let particles = plummer_n(p, rng.next_u64());
        let theta = Theta::new(theta).expect("valid theta");
        let engine = Engine::new(EngineConfig::new(workers)).expect("nonzero workers");
        let tree = build_with_moments(&particles).expect("tree builds");
        let (row, _) = flatten(&tree, &engine);
        let outputs = wire(&row, &tree, &particles, theta, &engine);
        let deps: Vec<usize> = outputs.iter().map(|o| o.deps.len()).collect();
        let g = grain.grain_for(p).expect("valid grain");
        let (management, element, get) = stage_task_count(p, &deps, g);

        let (_, stats) =
            execute_force_stage(&row, outputs, &particles, grain, ForceParams::default(), &engine)
                .expect("force stage completes");
        ok &= stats.management_tasks == management
            && stats.element_tasks == element
            && stats.get_tasks == get;
        rounds += 1;
    }

    let elapsed = start.elapsed();
    report(
        7,
        ok && elapsed < Duration::from_secs(10),
        format!(
            "streaming StageStats equal stage_task_count exactly over {rounds} fuzzed \
             (P, deps, grain) configurations ({:.1}s, bound 10s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_spawn_overhead_report() {
    let _gate = gate();
    let engine: Engine<u64> = Engine::new(EngineConfig::new(2)).expect("nonzero workers");
    for _ in 0..100_000 {
        engine.spawn(Task::new(|_| {}), None).expect("spawn succeeds");
    }
    let stats = engine.quiesce().expect("no deadlock");
    let summary = stats.spawn_overhead;
    let median_us = summary.median_ns as f64 / 1000.0;
    let p95_us = summary.p95_ns as f64 / 1000.0;
    // Report-only: the 10 µs figure describes modern hosts, and the
    // criterion gates nothing.
    report(
        8,
        summary.samples > 0,
        format!(
            "median spawn+dispatch overhead {median_us:.2} µs, p95 {p95_us:.2} µs over \
             {} sampled spawns (target < 10 µs on modern hosts, report-only: within \
             target = {})",
            summary.samples,
            median_us < 10.0
        ),
    );
}

#[test]
fn criterion_09_engine_properties() {
    let _gate = gate();
    let start = Instant::now();

    // Exactly-once execution: every spawned task runs once, and a join
    // over racing setters fires once with exactly one winning set.
    let engine: Engine<u64> = Engine::new(EngineConfig::new(4)).expect("nonzero workers");
    let runs = Arc::new(AtomicU64::new(0));
    for _ in 0..1000 {
        let runs = Arc::clone(&runs);
        engine
            .spawn(Task::new(move |_| { runs.fetch_add(1, Ordering::Relaxed); }), None)
            .expect("spawn succeeds");
    }
    let stats = engine.quiesce().expect("no deadlock");
    let exactly_once = runs.load(Ordering::Relaxed) == 1000
        && stats.tasks_spawned == 1000
        && stats.tasks_completed == 1000;

    let gid = engine.future_new();
    let fired = Arc::new(AtomicU64::new(0));
    {
        let fired = Arc::clone(&fired);
        engine
            .when_all(&[gid], move |_, _| { fired.fetch_add(1, Ordering::Relaxed); })
            .expect("join registers");
    }
    let engine_ref = &engine;
    let wins: u64 = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..16)
            .map(|v| scope.spawn(move || u64::from(engine_ref.future_set(gid, v).is_ok())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("setter thread")).sum()
    });
    engine.quiesce().expect("no deadlock");
    let exactly_once = exactly_once && wins == 1 && fired.load(Ordering::Relaxed) == 1;

    // Single-assignment violation detection.
    let twice = engine.future_new();
    engine.future_set(twice, 5).expect("first set succeeds");
    let single_assignment =
        engine.future_set(twice, 6) == Err(EngineError::AlreadySet(twice));

    // Deadlock report naming the unsatisfied gids, with the engine usable
    // afterwards.
    let dangling = engine.future_new();
    engine.future_get(dangling, |_, _| {}).expect("get registers");
    let deadlock_reported = match engine.quiesce() {
        Err(EngineError::Deadlock { unsatisfied }) => unsatisfied.contains(&dangling),
        _ => false,
    };
    engine.future_set(dangling, 1).expect("set after deadlock report");
    let usable_after = engine.quiesce().is_ok();

    // Round-robin placement law: unhinted external spawns land on workers
    // 0,1,2,...,W-1 cyclically (observable because tasks run where queued).
    let fresh: Engine<u64> = Engine::new(EngineConfig::new(4)).expect("nonzero workers");
    for _ in 0..20 {
        fresh.spawn(Task::new(|_| {}), None).expect("spawn succeeds");
    }
    fresh.quiesce().expect("no deadlock");
    let round_robin = fresh.completed_per_worker() == vec![5, 5, 5, 5];

    let elapsed = start.elapsed();
    let all = [exactly_once, single_assignment, deadlock_reported && usable_after, round_robin];
    report(
        9,
        all.iter().all(|&p| p) && elapsed < Duration::from_secs(10),
        format!(
            "engine properties — exactly-once {}, single-assignment violation {}, deadlock \
             report {}, round-robin law {} ({:.1}s, bound 10s)",
            exactly_once,
            single_assignment,
            deadlock_reported && usable_after,
            round_robin,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_10_physics_health() {
    let _gate = gate();
    let start = Instant::now();

    // Two-body circular orbit: equal masses 0.5 at ±0.5 with v = ∓0.5 give
    // radius 0.5 and period 2π; radius drift < 1% after one period.
    let binary = vec![
        Particle::new(0.5, Vec3::new(-0.5, 0.0, 0.0), Vec3::new(0.0, -0.5, 0.0)),
        Particle::new(0.5, Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.0, 0.5, 0.0)),
    ];
    let config = SimConfig {
        steps: (std::f64::consts::TAU / 1e-3).round() as usize,
        dt: 1e-3,
        theta: Theta::ZERO,
        params: ForceParams { g_const: 1.0, softening: 0.0 },
        ..SimConfig::new(2)
    };
    let (state, _) = simulate(binary, &config).expect("orbit completes");
    let orbit_drift = state
        .particles
        .iter()
        .map(|p| (p.position.norm() - 0.5).abs() / 0.5)
        .fold(0.0f64, f64::max);

    // Energy conservation: N=256, θ=0, 100 leapfrog steps.
    let config = SimConfig {
        steps: 100,
        theta: Theta::ZERO,
        seed: 1,
        ..SimConfig::new(256)
    };
    let particles = plummer_n(256, 1);
    let before = diagnostics(
        &nbody_core::sim::SimState {
            particles: particles.clone(),
            time: 0.0,
            iteration: 0,
            staggered: false,
        },
        &config.params,
    );
    let (state, _) = simulate(particles, &config).expect("cluster run completes");
    let after = diagnostics(&state, &config.params);
    let energy_drift = (after.total - before.total).abs() / before.total.abs();

    // Plummer structure: half-mass radius of an a=1 sphere is
    // a/√(2^(2/3)−1) ≈ 1.305.
    let sample = plummer_n(10_000, 4);
    let mut radii: Vec<f64> = sample.iter().map(|p| p.position.norm()).collect();
    radii.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let half_mass = radii[radii.len() / 2];
    let expected = 1.0 / (2f64.powf(2.0 / 3.0) - 1.0).sqrt();
    let half_mass_dev = (half_mass - expected).abs() / expected;

    let elapsed = start.elapsed();
    let ok = orbit_drift < 0.01
        && energy_drift < 1e-3
        && half_mass_dev < 0.05
        && elapsed < Duration::from_secs(60);
    report(
        10,
        ok,
        format!(
            "orbit radius drift {:.2e} (< 1e-2 per period), energy drift {:.2e} over 100 \
             steps (< 1e-3), half-mass radius {half_mass:.3} vs {expected:.3} expected \
             ({:.1}% ≤ 5%) ({:.1}s, bound 60s)",
            orbit_drift,
            energy_drift,
            half_mass_dev * 100.0,
            elapsed.as_secs_f64()
        ),
    );
}
