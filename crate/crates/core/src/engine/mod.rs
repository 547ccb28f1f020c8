//! Event-driven dataflow execution engine.
//!
//! The engine owns a fixed pool of worker threads, one FIFO queue per
//! worker, and a registry of single-assignment futures addressed by [`Gid`].
//! Tasks are plain closures; they suspend by registering a continuation on
//! a future (`future_get`) or on a set of futures (`when_all`) instead of
//! blocking, so a worker is never parked on unresolved data — it just runs
//! whatever is next in its queue.
//!
//! Placement: an explicit queue hint pins a task to that worker's queue;
//! unhinted tasks are placed round-robin. Wakeups (continuations released
//! by a `future_set`) follow the hint captured at registration time, or
//! round-robin if there was none. Work stealing is off by default and can
//! be enabled in [`EngineConfig`]; an idle worker then steals from the
//! front of a sibling queue after a short wait.
//!
//! `quiesce` blocks the *calling* (non-worker) thread until no task is
//! queued or running, then reports either the counter snapshot or — if
//! continuations are still parked on futures nobody set — a deadlock
//! listing the unsatisfied gids.
//!
//! Tasks must not panic: a panicking task tears down its worker thread and
//! the engine will never quiesce.

mod registry;
mod stats;

use std::cell::Cell as StdCell;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use registry::Gid;
pub use stats::{EngineStats, HistogramSummary};

use registry::{GetOutcome, JoinState, Registry, Waiter};
use stats::{CounterSet, LatencyHistogram};

/// Payload type stored in future cells and passed to continuations.
/// Blanket-implemented; bounds exist because payloads are cloned per
/// delivery and cross threads.
pub trait Payload: Clone + Send + 'static {}
impl<T: Clone + Send + 'static> Payload for T {}

/// A task body. Runs exactly once on some worker thread.
pub type Action<T> = Box<dyn FnOnce(&Ctx<'_, T>) + Send>;
/// Continuation of a `future_get`: receives the cell's value.
pub type GetCont<T> = Box<dyn FnOnce(&Ctx<'_, T>, T) + Send>;
/// Continuation of a `when_all`: receives all values in dependency order.
pub type JoinAction<T> = Box<dyn FnOnce(&Ctx<'_, T>, Vec<T>) + Send>;

/// Identifier assigned to every unit of work at enqueue time; monotonic
/// per engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

/// A spawnable task: an action plus an optional continuation that runs
/// immediately after it on the same worker (no re-queue between them).
pub struct Task<T: Payload> {
    action: Action<T>,
    continuation: Option<Action<T>>,
}

impl<T: Payload> Task<T> {
    pub fn new(action: impl FnOnce(&Ctx<'_, T>) + Send + 'static) -> Self {
        Task { action: Box::new(action), continuation: None }
    }

    pub fn with_continuation(mut self, cont: impl FnOnce(&Ctx<'_, T>) + Send + 'static) -> Self {
        self.continuation = Some(Box::new(cont));
        self
    }
}

/// Placement policy for unhinted spawns. Round-robin is the only policy:
/// it is stateless per task and keeps placement reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Placement {
    #[default]
    RoundRobin,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Number of worker threads (and queues). Must be nonzero.
    pub workers: usize,
    /// Policy for tasks spawned without a queue hint.
    pub placement: Placement,
    /// Let idle workers steal from the front of sibling queues.
    pub stealing: bool,
}

impl EngineConfig {
    pub fn new(workers: usize) -> Self {
        EngineConfig { workers, placement: Placement::RoundRobin, stealing: false }
    }
}

fn fmt_gids(gids: &[Gid]) -> String {
    const SHOW: usize = 8;
    let mut s = gids.iter().take(SHOW).map(Gid::to_string).collect::<Vec<_>>().join(", ");
    if gids.len() > SHOW {
        s.push_str(&format!(", … ({} total)", gids.len()));
    }
    s
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("engine needs at least one worker")]
    ZeroWorkers,
    #[error("queue hint {hint} out of range for {workers} workers")]
    BadQueueHint { hint: usize, workers: usize },
    #[error("unknown future {0}")]
    UnknownGid(Gid),
    #[error("future {0} already set")]
    AlreadySet(Gid),
    #[error("quiesce called from inside a task")]
    QuiesceWithinTask,
    #[error("deadlock: futures never set but waited on: {}", fmt_gids(unsatisfied))]
    Deadlock { unsatisfied: Vec<Gid> },
}

/// One executable unit in a worker queue.
enum Work<T: Payload> {
    Task { action: Action<T>, continuation: Option<Action<T>> },
    Get { cont: GetCont<T>, payload: T },
    Join { join: Arc<JoinState<T>> },
}

struct Runnable<T: Payload> {
    work: Work<T>,
}

struct WorkerQueue<T: Payload> {
    q: Mutex<VecDeque<Runnable<T>>>,
    cv: Condvar,
}

impl<T: Payload> WorkerQueue<T> {
    fn new() -> Self {
        WorkerQueue { q: Mutex::new(VecDeque::new()), cv: Condvar::new() }
    }
}

/// Fraction of spawns whose enqueue latency is recorded: 1 in 16.
const SPAWN_SAMPLE_MASK: u64 = 0xF;
/// How long an idle worker waits before attempting to steal.
const STEAL_POLL: Duration = Duration::from_millis(1);

struct Shared<T: Payload> {
    queues: Vec<WorkerQueue<T>>,
    registry: Registry<T>,
    counters: CounterSet,
    spawn_hist: LatencyHistogram,
    next_task: AtomicU64,
    rr: AtomicU64,
    /// Tasks enqueued or running. Incremented before a push becomes
    /// visible, decremented after the task body finishes, so it can only
    /// read 0 when the engine is truly idle.
    in_flight: AtomicU64,
    idle: Mutex<()>,
    idle_cv: Condvar,
    shutdown: AtomicBool,
    stealing: bool,
    workers: usize,
}

thread_local! {
    /// Worker index of the current thread, if it is an engine worker.
    /// Guards quiesce against being called from task context.
    static CURRENT_WORKER: StdCell<Option<usize>> = const { StdCell::new(None) };
}

impl<T: Payload> Shared<T> {
    fn validate_hint(&self, hint: Option<usize>) -> Result<(), EngineError> {
        match hint {
            Some(h) if h >= self.workers => {
                Err(EngineError::BadQueueHint { hint: h, workers: self.workers })
            }
            _ => Ok(()),
        }
    }

    /// Places work on a queue. `hint` must already be validated; `slot` is
    /// the counter cell of the spawning context.
    fn enqueue_work(&self, work: Work<T>, hint: Option<usize>, slot: usize) -> TaskId {
        let cell = self.counters.cell(slot);
        let sampled = cell.tick.fetch_add(1, Ordering::Relaxed) & SPAWN_SAMPLE_MASK == 0;
        let t0 = sampled.then(Instant::now);

        let id = TaskId(self.next_task.fetch_add(1, Ordering::Relaxed));
        let target = match hint {
            Some(h) => h,
            None => (self.rr.fetch_add(1, Ordering::Relaxed) % self.workers as u64) as usize,
        };
        debug_assert!(target < self.workers);

        // Before the push: a worker may pop and finish the task instantly,
        // and the decrement must never observe a counter it outran.
        self.in_flight.fetch_add(1, Ordering::AcqRel);
        cell.spawned.fetch_add(1, Ordering::Relaxed);

        let was_empty;
        {
            let mut q = self.queues[target].q.lock().unwrap();
            was_empty = q.is_empty();
            q.push_back(Runnable { work });
        }
        if was_empty {
            self.queues[target].cv.notify_one();
        }

        if let Some(t0) = t0 {
            self.spawn_hist.record(t0.elapsed().as_nanos() as u64);
        }
        id
    }

    fn spawn_inner(
        &self,
        task: Task<T>,
        hint: Option<usize>,
        slot: usize,
    ) -> Result<TaskId, EngineError> {
        self.validate_hint(hint)?;
        Ok(self.enqueue_work(
            Work::Task { action: task.action, continuation: task.continuation },
            hint,
            slot,
        ))
    }

    fn set_inner(&self, gid: Gid, value: T, slot: usize) -> Result<(), EngineError> {
        let (waiters, payload) = self.registry.set(gid, value)?;
        self.counters.cell(slot).sets.fetch_add(1, Ordering::Relaxed);
        // Waiters wake in registration order. Hints were validated when the
        // waiters were registered.
        for waiter in waiters {
            match waiter {
                Waiter::Get { cont, hint } => {
                    self.enqueue_work(Work::Get { cont, payload: payload.clone() }, hint, slot);
                }
                Waiter::Join(join) => {
                    let hint = join.hint;
                    if join.complete_one() {
                        self.enqueue_work(Work::Join { join }, hint, slot);
                    }
                }
            }
        }
        Ok(())
    }

    fn get_inner(
        &self,
        gid: Gid,
        cont: GetCont<T>,
        hint: Option<usize>,
        slot: usize,
    ) -> Result<(), EngineError> {
        self.validate_hint(hint)?;
        self.counters.cell(slot).gets.fetch_add(1, Ordering::Relaxed);
        match self.registry.get(gid, cont, hint)? {
            GetOutcome::Ready { cont, payload } => {
                self.enqueue_work(Work::Get { cont, payload }, hint, slot);
            }
            GetOutcome::Parked => {
                self.counters.cell(slot).suspensions.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    fn when_all_inner(
        &self,
        gids: &[Gid],
        action: JoinAction<T>,
        hint: Option<usize>,
        slot: usize,
    ) -> Result<(), EngineError> {
        self.validate_hint(hint)?;
        // Validate everything up front: registration must not fail partway,
        // or an earlier cell could fire a join that was never fully armed.
        for &gid in gids {
            if !self.registry.exists(gid) {
                return Err(EngineError::UnknownGid(gid));
            }
        }
        let join = Arc::new(JoinState::new(gids.to_vec(), action, hint));
        self.registry.register_join(&join);
        // Drop the registration guard; if every dependency was already set
        // this fires the join here, exactly once.
        if join.complete_one() {
            let hint = join.hint;
            self.enqueue_work(Work::Join { join }, hint, slot);
        } else {
            self.counters.cell(slot).suspensions.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    fn finish_one(&self, worker: usize) {
        self.counters.cell(worker).completed.fetch_add(1, Ordering::Relaxed);
        if self.in_flight.fetch_sub(1, Ordering::AcqRel) == 1 {
            // Last task out: wake quiescers. Lock pairs with their
            // check-then-wait so the notify cannot slip between them.
            let _g = self.idle.lock().unwrap();
            self.idle_cv.notify_all();
        }
    }

    fn snapshot(&self) -> EngineStats {
        EngineStats {
            tasks_spawned: self.counters.sum(|c| &c.spawned),
            tasks_completed: self.counters.sum(|c| &c.completed),
            suspensions: self.counters.sum(|c| &c.suspensions),
            sets: self.counters.sum(|c| &c.sets),
            gets: self.counters.sum(|c| &c.gets),
            spawn_overhead: self.spawn_hist.summary(),
        }
    }
}

/// Handle passed to every running task; all engine operations called from
/// inside a task go through it. Spawns made through a `Ctx` are attributed
/// to this worker's counter cell.
pub struct Ctx<'e, T: Payload> {
    shared: &'e Shared<T>,
    worker: usize,
}

impl<T: Payload> Ctx<'_, T> {
    /// Index of the worker running this task. Useful as a queue hint to
    /// keep follow-up work local.
    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn spawn(&self, task: Task<T>, hint: Option<usize>) -> Result<TaskId, EngineError> {
        self.shared.spawn_inner(task, hint, self.worker)
    }

    pub fn future_new(&self) -> Gid {
        self.shared.registry.fresh()
    }

    pub fn future_set(&self, gid: Gid, value: T) -> Result<(), EngineError> {
        self.shared.set_inner(gid, value, self.worker)
    }

    pub fn future_get(
        &self,
        gid: Gid,
        cont: impl FnOnce(&Ctx<'_, T>, T) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.get_inner(gid, Box::new(cont), None, self.worker)
    }

    /// `future_get` with the continuation pinned to a worker queue.
    pub fn future_get_on(
        &self,
        queue: usize,
        gid: Gid,
        cont: impl FnOnce(&Ctx<'_, T>, T) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.get_inner(gid, Box::new(cont), Some(queue), self.worker)
    }

    pub fn when_all(
        &self,
        gids: &[Gid],
        action: impl FnOnce(&Ctx<'_, T>, Vec<T>) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.when_all_inner(gids, Box::new(action), None, self.worker)
    }

    /// `when_all` with the join body pinned to a worker queue.
    pub fn when_all_on(
        &self,
        queue: usize,
        gids: &[Gid],
        action: impl FnOnce(&Ctx<'_, T>, Vec<T>) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.when_all_inner(gids, Box::new(action), Some(queue), self.worker)
    }

    pub fn peek(&self, gid: Gid) -> Result<Option<T>, EngineError> {
        self.shared.registry.peek(gid)
    }
}

fn run_work<T: Payload>(work: Work<T>, ctx: &Ctx<'_, T>) {
    match work {
        Work::Task { action, continuation } => {
            action(ctx);
            if let Some(cont) = continuation {
                cont(ctx);
            }
        }
        Work::Get { cont, payload } => cont(ctx, payload),
        Work::Join { join } => {
            let action = join.take_action().expect("join fired more than once");
            let payloads = join
                .gids
                .iter()
                .map(|&gid| {
                    ctx.shared
                        .registry
                        .peek(gid)
                        .expect("join gid validated at registration")
                        .expect("join fired before all dependencies were set")
                })
                .collect();
            action(ctx, payloads);
        }
    }
}

fn next_job<T: Payload>(shared: &Shared<T>, me: usize) -> Option<Runnable<T>> {
    let mine = &shared.queues[me];
    let mut q = mine.q.lock().unwrap();
    loop {
        if let Some(job) = q.pop_front() {
            return Some(job);
        }
        if shared.shutdown.load(Ordering::Acquire) {
            return None;
        }
        if shared.stealing {
            // Release our own lock while poking at siblings.
            drop(q);
            for offset in 1..shared.workers {
                let victim = (me + offset) % shared.workers;
                let mut vq = shared.queues[victim].q.lock().unwrap();
                if let Some(job) = vq.pop_front() {
                    return Some(job);
                }
            }
            q = mine.q.lock().unwrap();
            // Recheck our queue, then nap briefly before the next round.
            if let Some(job) = q.pop_front() {
                return Some(job);
            }
            if shared.shutdown.load(Ordering::Acquire) {
                return None;
            }
            let (guard, _timeout) = mine.cv.wait_timeout(q, STEAL_POLL).unwrap();
            q = guard;
        } else {
            q = mine.cv.wait(q).unwrap();
        }
    }
}

fn worker_loop<T: Payload>(shared: Arc<Shared<T>>, me: usize) {
    CURRENT_WORKER.with(|w| w.set(Some(me)));
    let ctx = Ctx { shared: &shared, worker: me };
    while let Some(job) = next_job(&shared, me) {
        run_work(job.work, &ctx);
        shared.finish_one(me);
    }
}

/// The engine: a fixed worker pool plus the future registry. Dropping it
/// stops the workers; tasks still queued at that point are discarded, so
/// `quiesce` first if completion matters.
pub struct Engine<T: Payload> {
    shared: Arc<Shared<T>>,
    handles: Vec<std::thread::JoinHandle<()>>,
}

impl<T: Payload> Engine<T> {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        if config.workers == 0 {
            return Err(EngineError::ZeroWorkers);
        }
        let Placement::RoundRobin = config.placement;
        let shared = Arc::new(Shared {
            queues: (0..config.workers).map(|_| WorkerQueue::new()).collect(),
            registry: Registry::new(),
            counters: CounterSet::new(config.workers),
            spawn_hist: LatencyHistogram::new(),
            next_task: AtomicU64::new(0),
            rr: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            idle: Mutex::new(()),
            idle_cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
            stealing: config.stealing,
            workers: config.workers,
        });
        let handles = (0..config.workers)
            .map(|i| {
                let shared = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn(move || worker_loop(shared, i))
                    .expect("failed to spawn worker thread")
            })
            .collect();
        Ok(Engine { shared, handles })
    }

    pub fn workers(&self) -> usize {
        self.shared.workers
    }

    /// External-slot counter cell index: calls from outside any worker.
    fn slot(&self) -> usize {
        self.shared.workers
    }

    pub fn spawn(&self, task: Task<T>, hint: Option<usize>) -> Result<TaskId, EngineError> {
        self.shared.spawn_inner(task, hint, self.slot())
    }

    pub fn future_new(&self) -> Gid {
        self.shared.registry.fresh()
    }

    pub fn future_set(&self, gid: Gid, value: T) -> Result<(), EngineError> {
        self.shared.set_inner(gid, value, self.slot())
    }

    pub fn future_get(
        &self,
        gid: Gid,
        cont: impl FnOnce(&Ctx<'_, T>, T) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.get_inner(gid, Box::new(cont), None, self.slot())
    }

    pub fn future_get_on(
        &self,
        queue: usize,
        gid: Gid,
        cont: impl FnOnce(&Ctx<'_, T>, T) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.get_inner(gid, Box::new(cont), Some(queue), self.slot())
    }

    pub fn when_all(
        &self,
        gids: &[Gid],
        action: impl FnOnce(&Ctx<'_, T>, Vec<T>) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.when_all_inner(gids, Box::new(action), None, self.slot())
    }

    pub fn when_all_on(
        &self,
        queue: usize,
        gids: &[Gid],
        action: impl FnOnce(&Ctx<'_, T>, Vec<T>) + Send + 'static,
    ) -> Result<(), EngineError> {
        self.shared.when_all_inner(gids, Box::new(action), Some(queue), self.slot())
    }

    /// Non-blocking read of a future; `Ok(None)` means not yet set.
    pub fn peek(&self, gid: Gid) -> Result<Option<T>, EngineError> {
        self.shared.registry.peek(gid)
    }

    /// Blocks until no task is queued or running, then returns the counter
    /// snapshot — or the deadlock report if parked continuations remain.
    /// Must be called from outside task context; the engine stays usable
    /// afterwards either way.
    pub fn quiesce(&self) -> Result<EngineStats, EngineError> {
        if CURRENT_WORKER.with(|w| w.get()).is_some() {
            return Err(EngineError::QuiesceWithinTask);
        }
        {
            let mut guard = self.shared.idle.lock().unwrap();
            while self.shared.in_flight.load(Ordering::Acquire) != 0 {
                guard = self.shared.idle_cv.wait(guard).unwrap();
            }
        }
        let unsatisfied = self.shared.registry.unsatisfied();
        if !unsatisfied.is_empty() {
            return Err(EngineError::Deadlock { unsatisfied });
        }
        Ok(self.shared.snapshot())
    }

    /// Counter snapshot without waiting. Racy while tasks run; exact after
    /// a successful `quiesce`.
    pub fn stats(&self) -> EngineStats {
        self.shared.snapshot()
    }

    /// Tasks completed by each worker, indexed by worker. Exact after a
    /// successful `quiesce`; useful for observing placement and balance.
    pub fn completed_per_worker(&self) -> Vec<u64> {
        (0..self.shared.workers)
            .map(|w| self.shared.counters.cell(w).completed.load(Ordering::Relaxed))
            .collect()
    }
}

impl<T: Payload> Drop for Engine<T> {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Release);
        for q in &self.shared.queues {
            // Take the lock so the notify cannot race a worker between its
            // shutdown check and its wait.
            let _g = q.q.lock().unwrap();
            q.cv.notify_all();
        }
        for handle in self.handles.drain(..) {
            let _ = handle.join();
        }
    }
}
