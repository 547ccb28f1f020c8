//! The Barnes-Hut force stage as a dataflow graph on the engine.
//!
//! The octree is flattened into an *input row*: one single-assignment
//! future per tree node (particle leaves and internal centroids alike),
//! pre-set with the node's mass and center of mass. Each particle then gets
//! an *output element* whose dependency list is its interaction list mapped
//! to input gids, plus a fresh result future.
//!
//! Execution fans out in two levels: the output row is split into
//! contiguous chunks of `grain` elements, one *management task* per chunk
//! is spawned round-robin across the worker queues, and each management
//! task spawns one *element task* per output element, pinned to its own
//! worker so a chunk's work stays local. The element task either joins all
//! dependencies at once (`Deterministic`: values arrive in dependency
//! order, so results are bitwise reproducible for any worker count) or
//! issues one `future_get` per dependency and folds contributions in
//! arrival order (`Streaming`: one wake per input, reassociation only).
//!
//! Grain is therefore the balance/overhead knob: small grain makes many
//! management tasks that spread across queues; large grain makes few,
//! cheap, but lumpier ones.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use thiserror::Error;

use crate::engine::{Engine, EngineError, Gid, Task};
use crate::math::Vec3;
use crate::octree::{
    accumulate, interaction_list, ForceParams, NodeKind, Octree, OctreeError, Particle, Theta,
};

/// What a flattened element stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    /// A leaf node: one particle, identified by its index.
    Particle { index: usize },
    /// An internal node carrying an aggregated centroid.
    InternalNode,
}

/// Payload of an input-row future: one tree node's contribution data.
#[derive(Clone, Copy, Debug)]
pub struct NodePayload {
    pub node_id: usize,
    pub kind: ElementKind,
    pub mass: f64,
    pub com: Vec3,
}

/// Value type flowing through the engine during the force stage.
#[derive(Clone, Copy, Debug)]
pub enum FlowValue {
    Node(NodePayload),
    Accel(Vec3),
}

/// One input-row element: a tree node's future, already set at flatten
/// time.
#[derive(Clone, Debug)]
pub struct InputElement {
    pub gid: Gid,
    pub payload: NodePayload,
}

/// One output-row element: a particle's result future plus the input gids
/// it depends on, in canonical interaction-list order. The acceleration
/// itself is delivered by setting `gid`.
#[derive(Clone, Debug)]
pub struct OutputElement {
    pub gid: Gid,
    pub particle_index: usize,
    pub deps: Vec<Gid>,
}

/// How the output row is chunked into management tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrainMode {
    /// Fixed number of output elements per management task.
    FixedGrain(usize),
    /// Fixed number of management tasks; grain becomes ceil(P / count).
    FixedCount(usize),
}

/// How per-dependency contributions are folded into a result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Accumulation {
    /// One when-all join per element; contributions folded in dependency
    /// order. Bitwise reproducible across worker counts.
    #[default]
    Deterministic,
    /// One future-get per dependency; contributions folded in arrival
    /// order under a per-element lock. Differs from Deterministic by
    /// floating-point reassociation only.
    Streaming,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrainConfig {
    pub mode: GrainMode,
    pub accumulation: Accumulation,
}

impl GrainConfig {
    pub fn fixed_grain(grain: usize) -> Self {
        GrainConfig { mode: GrainMode::FixedGrain(grain), accumulation: Accumulation::default() }
    }

    pub fn fixed_count(count: usize) -> Self {
        GrainConfig { mode: GrainMode::FixedCount(count), accumulation: Accumulation::default() }
    }

    pub fn with_accumulation(mut self, accumulation: Accumulation) -> Self {
        self.accumulation = accumulation;
        self
    }

    /// Elements per management task for an output row of `p` elements.
    pub fn grain_for(&self, p: usize) -> Result<usize, DataflowError> {
        match self.mode {
            GrainMode::FixedGrain(0) => Err(DataflowError::InvalidGrain),
            GrainMode::FixedGrain(g) => Ok(g),
            GrainMode::FixedCount(0) => Err(DataflowError::InvalidCount),
            GrainMode::FixedCount(t) => Ok(p.div_ceil(t).max(1)),
        }
    }
}

/// Task accounting for one force stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageStats {
    /// Chunk managers: ceil(P / grain).
    pub management_tasks: u64,
    /// One per output element: P.
    pub element_tasks: u64,
    /// Streaming: one per dependency (sum of list lengths). Deterministic:
    /// one when-all join per element (= P) stands in for the per-dependency
    /// gets.
    pub get_tasks: u64,
    /// Wall-clock time of the stage, spawn through quiesce, in seconds.
    pub wall_time_force: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DataflowError {
    #[error("grain must be at least 1 element per management task")]
    InvalidGrain,
    #[error("management task count must be at least 1")]
    InvalidCount,
    #[error("input future {0} is unset at stage start")]
    InputNotSet(Gid),
    #[error("engine failure during force stage: {0}")]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Force(#[from] OctreeError),
}

/// Predicted stage counters for P elements with the given dependency-list
/// sizes at grain g: (management, element, get) tasks. The get count is the
/// Streaming-mode figure; Deterministic mode replaces the per-dependency
/// gets with one join per element.
pub fn stage_task_count(p: usize, deps_sizes: &[usize], g: usize) -> (u64, u64, u64) {
    assert!(g >= 1, "grain must be at least 1");
    assert_eq!(deps_sizes.len(), p, "one dependency list per element");
    (p.div_ceil(g) as u64, p as u64, deps_sizes.iter().map(|&n| n as u64).sum())
}

/// Flattens the tree into the input row: one future per node in node-id
/// (depth-first) order, each set with its payload before return. Also
/// returns the node-id → gid map (which, with dense node ids, is just the
/// gid column of the row).
pub fn flatten(tree: &Octree, engine: &Engine<FlowValue>) -> (Vec<InputElement>, Vec<Gid>) {
    let mut row = Vec::with_capacity(tree.node_count());
    let mut gids = Vec::with_capacity(tree.node_count());
    for (node_id, node) in tree.nodes().iter().enumerate() {
        let kind = match node.kind {
            NodeKind::Leaf { particle } => ElementKind::Particle { index: particle },
            NodeKind::Internal { .. } => ElementKind::InternalNode,
        };
        let payload = NodePayload { node_id, kind, mass: node.mass, com: node.com };
        let gid = engine.future_new();
        engine
            .future_set(gid, FlowValue::Node(payload))
            .expect("fresh future can always be set");
        row.push(InputElement { gid, payload });
        gids.push(gid);
    }
    (row, gids)
}

/// Wires the output row: one element per particle (ascending particle
/// index), its deps being the interaction list mapped through the input
/// row, plus a fresh unset result future.
pub fn wire(
    input_row: &[InputElement],
    tree: &Octree,
    particles: &[Particle],
    theta: Theta,
    engine: &Engine<FlowValue>,
) -> Vec<OutputElement> {
    debug_assert_eq!(input_row.len(), tree.node_count());
    (0..particles.len())
        .map(|i| {
            let deps = interaction_list(tree, particles, i, theta)
                .iter()
                .map(|source| input_row[source.node_id].gid)
                .collect();
            OutputElement { gid: engine.future_new(), particle_index: i, deps }
        })
        .collect()
}

/// Arrival-order accumulator for one Streaming-mode element.
struct StreamAccum {
    remaining: AtomicUsize,
    total: Mutex<Vec3>,
}

/// Records the first force error seen by any task in the stage.
type FailureSlot = Arc<Mutex<Option<OctreeError>>>;

fn record_failure(slot: &FailureSlot, err: OctreeError) {
    let mut slot = slot.lock().unwrap();
    if slot.is_none() {
        *slot = Some(err);
    }
}

fn node_source(value: &FlowValue) -> (f64, Vec3) {
    match value {
        FlowValue::Node(p) => (p.mass, p.com),
        FlowValue::Accel(_) => {
            unreachable!("output-element dependencies always carry node payloads")
        }
    }
}

/// Runs the force stage: spawns the management/element task graph, waits
/// for quiescence, and collects the per-particle accelerations (indexed by
/// particle) plus the stage counters.
///
/// `input_row` must be fully set (it is after [`flatten`]); the engine must
/// be otherwise idle, since the stage quiesces it to detect completion.
pub fn execute_force_stage(
    input_row: &[InputElement],
    output_row: Vec<OutputElement>,
    particles: &[Particle],
    grain: GrainConfig,
    params: ForceParams,
    engine: &Engine<FlowValue>,
) -> Result<(Vec<Vec3>, StageStats), DataflowError> {
    params.validate()?;
    let p = output_row.len();
    let g = grain.grain_for(p)?;
    for element in input_row {
        match engine.peek(element.gid)? {
            Some(FlowValue::Node(_)) => {}
            _ => return Err(DataflowError::InputNotSet(element.gid)),
        }
    }
    let get_tasks = match grain.accumulation {
        Accumulation::Deterministic => p as u64,
        Accumulation::Streaming => output_row.iter().map(|o| o.deps.len() as u64).sum(),
    };

    let outputs = Arc::new(output_row);
    let positions: Arc<Vec<Vec3>> = Arc::new(particles.iter().map(|pt| pt.position).collect());
    let failure: FailureSlot = Arc::new(Mutex::new(None));

    let started = Instant::now();
    let chunks = p.div_ceil(g);
    for chunk in 0..chunks {
        let lo = chunk * g;
        let hi = ((chunk + 1) * g).min(p);
        let outputs = Arc::clone(&outputs);
        let positions = Arc::clone(&positions);
        let failure = Arc::clone(&failure);
        let accumulation = grain.accumulation;
        // Management tasks are unhinted: round-robin placement spreads the
        // chunks across workers.
        engine.spawn(
            Task::new(move |ctx| {
                let home = ctx.worker();
                for idx in lo..hi {
                    let element = element_task(
                        Arc::clone(&outputs),
                        Arc::clone(&positions),
                        Arc::clone(&failure),
                        idx,
                        accumulation,
                        params,
                    );
                    // Element tasks stay on the chunk's worker: the chunk,
                    // not the task, is the unit of distribution.
                    ctx.spawn(element, Some(home)).expect("hint is this worker");
                }
            }),
            None,
        )?;
    }
    engine.quiesce()?;
    let wall_time_force = started.elapsed().as_secs_f64();

    if let Some(err) = failure.lock().unwrap().take() {
        return Err(err.into());
    }
    let mut accels = vec![Vec3::zero(); p];
    for element in outputs.iter() {
        match engine.peek(element.gid)? {
            Some(FlowValue::Accel(a)) => accels[element.particle_index] = a,
            _ => unreachable!("quiesce guarantees every result future is set"),
        }
    }
    let stats = StageStats {
        management_tasks: chunks as u64,
        element_tasks: p as u64,
        get_tasks,
        wall_time_force,
    };
    Ok((accels, stats))
}

/// Builds the task for one output element under the chosen accumulation
/// mode.
fn element_task(
    outputs: Arc<Vec<OutputElement>>,
    positions: Arc<Vec<Vec3>>,
    failure: FailureSlot,
    idx: usize,
    accumulation: Accumulation,
    params: ForceParams,
) -> Task<FlowValue> {
    Task::new(move |ctx| {
        let element = &outputs[idx];
        let target = positions[element.particle_index];
        let result_gid = element.gid;
        let home = ctx.worker();
        match accumulation {
            Accumulation::Deterministic => {
                let failure = Arc::clone(&failure);
                ctx.when_all_on(home, &element.deps, move |join_ctx, values| {
                    let accel =
                        match accumulate(target, values.iter().map(node_source), &params) {
                            Ok(a) => a,
                            Err(err) => {
                                record_failure(&failure, err);
                                Vec3::zero()
                            }
                        };
                    join_ctx
                        .future_set(result_gid, FlowValue::Accel(accel))
                        .expect("each result future is set exactly once");
                })
                .expect("deps come from the validated input row");
            }
            Accumulation::Streaming => {
                let n = element.deps.len();
                if n == 0 {
                    ctx.future_set(result_gid, FlowValue::Accel(Vec3::zero()))
                        .expect("each result future is set exactly once");
                    return;
                }
                let accum = Arc::new(StreamAccum {
                    remaining: AtomicUsize::new(n),
                    total: Mutex::new(Vec3::zero()),
                });
                for &dep in &element.deps {
                    let accum = Arc::clone(&accum);
                    let failure = Arc::clone(&failure);
                    ctx.future_get_on(home, dep, move |get_ctx, value| {
                        let source = std::iter::once(node_source(&value));
                        match accumulate(target, source, &params) {
                            Ok(contribution) => {
                                *accum.total.lock().unwrap() += contribution;
                            }
                            Err(err) => record_failure(&failure, err),
                        }
                        if accum.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
                            let total = *accum.total.lock().unwrap();
                            get_ctx
                                .future_set(result_gid, FlowValue::Accel(total))
                                .expect("last arrival sets the result once");
                        }
                    })
                    .expect("deps come from the validated input row");
                }
            }
        }
    })
}
