//! Iteration driver: per-step tree rebuild, force evaluation through a
//! pluggable backend, and synchronized-leapfrog (kick-drift-kick) time
//! integration with force reuse.
//!
//! Each step performs exactly one force evaluation. The closing half-kick
//! of step k uses the acceleration computed at the start of step k+1 (the
//! positions it needs are already in place), so velocities trail positions
//! by half a kick between steps; [`Simulation::finalize`] applies the last
//! closing kick to resynchronize them. The scheme is velocity-Verlet
//! equivalent at one evaluation per step.
//!
//! The driver itself is sequential; all concurrency lives inside the force
//! backends (the dataflow engine or the static-chunk thread fan-out), each
//! of which fully joins before the driver proceeds.

use std::time::Instant;

use thiserror::Error;

use crate::dataflow::{
    execute_force_stage, flatten, wire, DataflowError, FlowValue, GrainConfig, StageStats,
};
use crate::engine::{Engine, EngineConfig, EngineError, EngineStats};
use crate::icgen::{plummer, IcError, PlummerConfig};
use crate::math::Vec3;
use crate::octree::{
    accel_from_sources, build_with_moments, interaction_list, ForceParams, Octree, OctreeError,
    Particle, Theta,
};

/// Force-evaluation strategy for one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Flattened-tree dataflow stage on the task engine.
    Dataflow,
    /// Equal contiguous particle chunks, one OS thread each, no
    /// redistribution.
    StaticChunk,
    /// Single-threaded reference loop.
    Serial,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub n: usize,
    pub theta: Theta,
    /// Time step in model units.
    pub dt: f64,
    pub steps: usize,
    pub params: ForceParams,
    pub grain: GrainConfig,
    pub workers: usize,
    pub backend: Backend,
    pub seed: u64,
}

impl SimConfig {
    /// A config with conventional defaults: θ=0.5, dt=10⁻³, one step, one
    /// worker, serial backend, grain 64.
    pub fn new(n: usize) -> Self {
        SimConfig {
            n,
            theta: Theta::new(0.5).expect("0.5 is a valid theta"),
            dt: 1e-3,
            steps: 1,
            params: ForceParams::default(),
            grain: GrainConfig::fixed_grain(64),
            workers: 1,
            backend: Backend::Serial,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::NoParticles);
        }
        if self.steps == 0 {
            return Err(SimError::NoSteps);
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::BadTimeStep(self.dt));
        }
        if self.workers == 0 {
            return Err(SimError::NoWorkers);
        }
        self.params.validate()?;
        self.grain.grain_for(self.n)?;
        Ok(())
    }
}

/// Particle set plus integration phase.
#[derive(Clone, Debug)]
pub struct SimState {
    pub particles: Vec<Particle>,
    /// Model time reached.
    pub time: f64,
    /// Completed iterations.
    pub iteration: u64,
    /// True while velocities trail positions by the closing half-kick (the
    /// leapfrog stagger between steps); cleared by `finalize`.
    pub staggered: bool,
}

/// Wall-clock decomposition of one iteration. For the dataflow backend,
/// tree_time includes flatten and wire (the stage setup); force_time is the
/// execute-force-stage wall time only. For serial/static backends,
/// force_time includes the interaction-list walks.
#[derive(Clone, Debug)]
pub struct IterationTiming {
    pub iteration: u64,
    pub tree_time: f64,
    pub force_time: f64,
    pub integrate_time: f64,
    pub total_time: f64,
    /// Stage counters; dataflow backend only.
    pub stage: Option<StageStats>,
    /// Mean interaction-list length across particles.
    pub mean_list_len: f64,
    /// Engine tasks spawned this iteration (0 for non-dataflow backends).
    pub tasks_spawned: u64,
    /// Engine suspensions this iteration (0 for non-dataflow backends).
    pub suspensions: u64,
    /// Max/min chunk wall-time ratio; static-chunk backend only.
    pub chunk_imbalance: Option<f64>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("particle count must be at least 1")]
    NoParticles,
    #[error("config expects {expected} particles, input has {actual}")]
    WrongCount { expected: usize, actual: usize },
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("numerical blowup at iteration {iteration}: non-finite particle state")]
    Blowup { iteration: u64 },
    #[error(transparent)]
    Tree(#[from] OctreeError),
    #[error(transparent)]
    Stage(#[from] DataflowError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ic(#[from] IcError),
}

/// Single-threaded reference force pass: per particle, interaction list
/// then kernel accumulation in canonical order. Returns accelerations and
/// the mean list length.
pub fn serial_force(
    particles: &[Particle],
    tree: &Octree,
    theta: Theta,
    params: &ForceParams,
) -> Result<(Vec<Vec3>, f64), OctreeError> {
    let mut accels = Vec::with_capacity(particles.len());
    let mut total_len = 0usize;
    for i in 0..particles.len() {
        let list = interaction_list(tree, particles, i, theta);
        total_len += list.len();
        accels.push(accel_from_sources(particles[i].position, &list, params)?);
    }
    let mean = if particles.is_empty() {
        0.0
    } else {
        total_len as f64 / particles.len() as f64
    };
    Ok((accels, mean))
}

/// Static-partition baseline: the particle range is split into equal
/// contiguous chunks (the last may be short), one OS thread per chunk, no
/// redistribution. Per-particle work is identical to [`serial_force`], so
/// results are bitwise equal to serial for any worker count. Returns
/// accelerations, per-chunk wall times, and the mean list length.
pub fn static_chunk_force(
    particles: &[Particle],
    tree: &Octree,
    theta: Theta,
    params: &ForceParams,
    workers: usize,
) -> Result<(Vec<Vec3>, Vec<f64>, f64), OctreeError> {
    let p = particles.len();
    let chunk = p.div_ceil(workers.max(1)).max(1);
    let mut accels = vec![Vec3::zero(); p];
    let outcomes: Vec<Result<(f64, usize), OctreeError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = accels
            .chunks_mut(chunk)
            .enumerate()
            .map(|(c, out)| {
                scope.spawn(move || {
                    let started = Instant::now();
                    let base = c * chunk;
                    let mut list_total = 0usize;
                    for (k, slot) in out.iter_mut().enumerate() {
                        let i = base + k;
                        let list = interaction_list(tree, particles, i, theta);
                        list_total += list.len();
                        *slot = accel_from_sources(particles[i].position, &list, params)?;
                    }
                    Ok((started.elapsed().as_secs_f64(), list_total))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chunk thread must not panic")).collect()
    });

    let mut chunk_times = Vec::with_capacity(outcomes.len());
    let mut total_len = 0usize;
    for outcome in outcomes {
        let (elapsed, list_total) = outcome?;
        chunk_times.push(elapsed);
        total_len += list_total;
    }
    let mean = if p == 0 { 0.0 } else { total_len as f64 / p as f64 };
    Ok((accels, chunk_times, mean))
}

fn imbalance(chunk_times: &[f64]) -> f64 {
    let max = chunk_times.iter().cloned().fold(f64::MIN, f64::max);
    let min = chunk_times.iter().cloned().fold(f64::MAX, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

struct ForceEval {
    accels: Vec<Vec3>,
    tree_time: f64,
    force_time: f64,
    stage: Option<StageStats>,
    mean_list_len: f64,
    tasks_spawned: u64,
    suspensions: u64,
    chunk_imbalance: Option<f64>,
}

/// A running simulation: owns the state, the config, and (for the dataflow
/// backend) the engine, which is reused across iterations.
pub struct Simulation {
    config: SimConfig,
    state: SimState,
    engine: Option<Engine<FlowValue>>,
}

impl Simulation {
    pub fn new(config: SimConfig, particles: Vec<Particle>) -> Result<Self, SimError> {
        config.validate()?;
        if particles.len() != config.n {
            return Err(SimError::WrongCount { expected: config.n, actual: particles.len() });
        }
        let engine = match config.backend {
            Backend::Dataflow => Some(Engine::new(EngineConfig::new(config.workers))?),
            Backend::StaticChunk | Backend::Serial => None,
        };
        let state = SimState { particles, time: 0.0, iteration: 0, staggered: false };
        Ok(Simulation { config, state, engine })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Cumulative engine counters (dataflow backend only).
    pub fn engine_stats(&self) -> Option<EngineStats> {
        self.engine.as_ref().map(Engine::stats)
    }

    /// One iteration: rebuild the tree (the per-iteration barrier), evaluate
    /// forces at the current positions, then kick-drift. The kick combines
    /// the previous step's closing half-kick with this step's opening one.
    pub fn step(&mut self) -> Result<IterationTiming, SimError> {
        let iteration = self.state.iteration;
        let step_started = Instant::now();
        let eval = self.evaluate_forces()?;

        let integrate_started = Instant::now();
        let dt = self.config.dt;
        let half = 0.5 * dt;
        let staggered = self.state.staggered;
        for (particle, &accel) in self.state.particles.iter_mut().zip(&eval.accels) {
            if staggered {
                // Closing half-kick of the previous step, using a(t).
                particle.velocity += accel * half;
            }
            // Opening half-kick, then drift.
            particle.velocity += accel * half;
            particle.position += particle.velocity * dt;
        }
        self.state.staggered = true;
        self.state.time += dt;
        self.state.iteration += 1;
        let integrate_time = integrate_started.elapsed().as_secs_f64();
        self.check_finite()?;

        Ok(IterationTiming {
            iteration,
            tree_time: eval.tree_time,
            force_time: eval.force_time,
            integrate_time,
            total_time: step_started.elapsed().as_secs_f64(),
            stage: eval.stage,
            mean_list_len: eval.mean_list_len,
            tasks_spawned: eval.tasks_spawned,
            suspensions: eval.suspensions,
            chunk_imbalance: eval.chunk_imbalance,
        })
    }

    /// Applies the pending closing half-kick (one extra force evaluation,
    /// not timed), synchronizing velocities with positions.
    pub fn finalize(&mut self) -> Result<(), SimError> {
        if !self.state.staggered {
            return Ok(());
        }
        let eval = self.evaluate_forces()?;
        let half = 0.5 * self.config.dt;
        for (particle, &accel) in self.state.particles.iter_mut().zip(&eval.accels) {
            particle.velocity += accel * half;
        }
        self.state.staggered = false;
        self.check_finite()
    }

    pub fn into_state(self) -> SimState {
        self.state
    }

    fn check_finite(&self) -> Result<(), SimError> {
        let healthy = self
            .state
            .particles
            .iter()
            .all(|p| p.position.is_finite() && p.velocity.is_finite());
        if healthy {
            Ok(())
        } else {
            Err(SimError::Blowup { iteration: self.state.iteration.saturating_sub(1) })
        }
    }

    fn evaluate_forces(&mut self) -> Result<ForceEval, SimError> {
        let particles = &self.state.particles;
        let tree_started = Instant::now();
        let tree = build_with_moments(particles)?;
        match self.config.backend {
            Backend::Serial => {
                let tree_time = tree_started.elapsed().as_secs_f64();
                let force_started = Instant::now();
                let (accels, mean_list_len) =
                    serial_force(particles, &tree, self.config.theta, &self.config.params)?;
                Ok(ForceEval {
                    accels,
                    tree_time,
                    force_time: force_started.elapsed().as_secs_f64(),
                    stage: None,
                    mean_list_len,
                    tasks_spawned: 0,
                    suspensions: 0,
                    chunk_imbalance: None,
                })
            }
            Backend::StaticChunk => {
                let tree_time = tree_started.elapsed().as_secs_f64();
                let force_started = Instant::now();
                let (accels, chunk_times, mean_list_len) = static_chunk_force(
                    particles,
                    &tree,
                    self.config.theta,
                    &self.config.params,
                    self.config.workers,
                )?;
                Ok(ForceEval {
                    accels,
                    tree_time,
                    force_time: force_started.elapsed().as_secs_f64(),
                    stage: None,
                    mean_list_len,
                    tasks_spawned: 0,
                    suspensions: 0,
                    chunk_imbalance: Some(imbalance(&chunk_times)),
                })
            }
            Backend::Dataflow => {
                let engine = self.engine.as_ref().expect("dataflow backend owns an engine");
                let (input_row, _gid_map) = flatten(&tree, engine);
                let output_row =
                    wire(&input_row, &tree, particles, self.config.theta, engine);
                let total_deps: usize = output_row.iter().map(|o| o.deps.len()).sum();
                let mean_list_len = if particles.is_empty() {
                    0.0
                } else {
                    total_deps as f64 / particles.len() as f64
                };
                // Flatten + wire are stage setup, charged to tree time.
                let tree_time = tree_started.elapsed().as_secs_f64();

                // The engine is quiescent outside the stage, so counter
                // deltas around it are exact.
                let before = engine.stats();
                let (accels, stage) = execute_force_stage(
                    &input_row,
                    output_row,
                    particles,
                    self.config.grain,
                    self.config.params,
                    engine,
                )?;
                let after = engine.stats();
                Ok(ForceEval {
                    accels,
                    tree_time,
                    force_time: stage.wall_time_force,
                    stage: Some(stage),
                    mean_list_len,
                    tasks_spawned: after.tasks_spawned - before.tasks_spawned,
                    suspensions: after.suspensions - before.suspensions,
                    chunk_imbalance: None,
                })
            }
        }
    }
}

/// Runs `config.steps` iterations over the given particles, then finalizes
/// (closing half-kick) so the returned state is time-synchronized.
pub fn simulate(
    particles: Vec<Particle>,
    config: &SimConfig,
) -> Result<(SimState, Vec<IterationTiming>), SimError> {
    let mut sim = Simulation::new(config.clone(), particles)?;
    let mut timings = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        timings.push(sim.step()?);
    }
    sim.finalize()?;
    Ok((sim.into_state(), timings))
}

/// Generates Plummer initial conditions from (n, seed) and runs the
/// simulation. Identical config therefore gives identical trajectories in
/// deterministic accumulation, independent of worker count.
pub fn run_simulation(config: &SimConfig) -> Result<(SimState, Vec<IterationTiming>), SimError> {
    config.validate()?;
    let ic = PlummerConfig {
        n: config.n,
        seed: config.seed,
        g_const: config.params.g_const,
        ..PlummerConfig::default()
    };
    let particles = plummer(&ic)?;
    simulate(particles, config)
}

/// Standard health numbers: kinetic and (softened) potential energy plus
/// net momentum. The potential uses the same softening as the force kernel,
/// so leapfrog conservation checks are consistent.
#[derive(Clone, Copy, Debug)]
pub struct Diagnostics {
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
    pub momentum: Vec3,
}

pub fn diagnostics(state: &SimState, params: &ForceParams) -> Diagnostics {
    let mut kinetic = 0.0;
    let mut momentum = Vec3::zero();
    for p in &state.particles {
        kinetic += 0.5 * p.mass * p.velocity.norm_sq();
        momentum += p.velocity * p.mass;
    }
    let eps2 = params.softening * params.softening;
    let mut potential = 0.0;
    for i in 0..state.particles.len() {
        for j in (i + 1)..state.particles.len() {
            let a = &state.particles[i];
            let b = &state.particles[j];
            let d = b.position - a.position;
            potential -= params.g_const * a.mass * b.mass / (d.norm_sq() + eps2).sqrt();
        }
    }
    Diagnostics { kinetic, potential, total: kinetic + potential, momentum }
}
