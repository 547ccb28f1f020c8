//! Single-assignment future cells addressed by global ids.
//!
//! Gids are dense (a monotonic counter), so the registry is a set of sharded
//! append-only slabs: shard = gid mod SHARDS, slot = gid / SHARDS. Lookups
//! are one short mutex hold plus an array index — no hashing. Cells are
//! never removed while the engine lives, so any allocated gid stays
//! resolvable until shutdown.
//!
//! Correctness invariant: a cell's transition Empty -> Set happens under its
//! shard lock, and waiter registration happens under the same lock, so a
//! getter either observes Set or is parked before the set drains waiters —
//! never neither.

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{EngineError, GetCont, JoinAction, Payload};

/// Global id of a single-assignment future cell. Monotonic, never reused
/// within one engine instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Gid(pub(crate) u64);

impl Gid {
    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Gid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

const SHARDS: usize = 64;

pub(super) enum Cell<T: Payload> {
    Empty { waiters: Vec<Waiter<T>> },
    Set(T),
}

impl<T: Payload> Cell<T> {
    fn empty() -> Self {
        Cell::Empty { waiters: Vec::new() }
    }
}

/// A parked consumer of a cell: either a get continuation (with its queue
/// hint) or a when-all join counting down its unset dependencies.
pub(super) enum Waiter<T: Payload> {
    Get { cont: GetCont<T>, hint: Option<usize> },
    Join(Arc<JoinState<T>>),
}

/// Countdown state of a when-all: `pending` starts at 1 (a registration
/// guard) and is incremented once per dependency found unset; whoever brings
/// it to zero fires the join exactly once.
pub(super) struct JoinState<T: Payload> {
    pub gids: Vec<Gid>,
    pub hint: Option<usize>,
    pending: AtomicUsize,
    action: Mutex<Option<JoinAction<T>>>,
}

impl<T: Payload> JoinState<T> {
    pub fn new(gids: Vec<Gid>, action: JoinAction<T>, hint: Option<usize>) -> Self {
        JoinState { gids, hint, pending: AtomicUsize::new(1), action: Mutex::new(Some(action)) }
    }

    fn add_pending(&self) {
        self.pending.fetch_add(1, Ordering::Relaxed);
    }

    /// Counts one dependency (or the registration guard) as satisfied;
    /// true means this call completed the join and the caller must fire it.
    pub fn complete_one(&self) -> bool {
        self.pending.fetch_sub(1, Ordering::AcqRel) == 1
    }

    pub fn take_action(&self) -> Option<JoinAction<T>> {
        self.action.lock().unwrap().take()
    }
}

pub(super) enum GetOutcome<T: Payload> {
    /// Cell already set: run the continuation with this payload.
    Ready { cont: GetCont<T>, payload: T },
    /// Continuation parked on an empty cell.
    Parked,
}

pub(super) struct Registry<T: Payload> {
    next: AtomicU64,
    shards: Vec<Mutex<Vec<Cell<T>>>>,
}

impl<T: Payload> Registry<T> {
    pub fn new() -> Self {
        Registry {
            next: AtomicU64::new(0),
            shards: (0..SHARDS).map(|_| Mutex::new(Vec::new())).collect(),
        }
    }

    fn locate(&self, gid: Gid) -> (&Mutex<Vec<Cell<T>>>, usize) {
        (&self.shards[(gid.0 % SHARDS as u64) as usize], (gid.0 / SHARDS as u64) as usize)
    }

    /// Cells are allocated by a monotonic counter and never removed, so
    /// existence is a bound check.
    pub fn exists(&self, gid: Gid) -> bool {
        gid.0 < self.next.load(Ordering::Acquire)
    }

    fn check(&self, gid: Gid) -> Result<(), EngineError> {
        if self.exists(gid) {
            Ok(())
        } else {
            Err(EngineError::UnknownGid(gid))
        }
    }

    pub fn fresh(&self) -> Gid {
        let gid = Gid(self.next.fetch_add(1, Ordering::AcqRel));
        let (shard, slot) = self.locate(gid);
        let mut cells = shard.lock().unwrap();
        if cells.len() <= slot {
            // Concurrent allocations in the same shard may arrive out of
            // order; fill the gap with the cells they will claim.
            cells.resize_with(slot + 1, Cell::empty);
        }
        gid
    }

    /// Transitions the cell to Set, returning the drained waiters (in
    /// registration order) and a payload copy for their delivery.
    pub fn set(&self, gid: Gid, value: T) -> Result<(Vec<Waiter<T>>, T), EngineError> {
        self.check(gid)?;
        let (shard, slot) = self.locate(gid);
        let mut cells = shard.lock().unwrap();
        match &mut cells[slot] {
            Cell::Set(_) => Err(EngineError::AlreadySet(gid)),
            Cell::Empty { waiters } => {
                let drained = std::mem::take(waiters);
                cells[slot] = Cell::Set(value.clone());
                Ok((drained, value))
            }
        }
    }

    /// Delivers immediately if the cell is set, otherwise parks the
    /// continuation.
    pub fn get(
        &self,
        gid: Gid,
        cont: GetCont<T>,
        hint: Option<usize>,
    ) -> Result<GetOutcome<T>, EngineError> {
        self.check(gid)?;
        let (shard, slot) = self.locate(gid);
        let mut cells = shard.lock().unwrap();
        match &mut cells[slot] {
            Cell::Set(v) => Ok(GetOutcome::Ready { cont, payload: v.clone() }),
            Cell::Empty { waiters } => {
                waiters.push(Waiter::Get { cont, hint });
                Ok(GetOutcome::Parked)
            }
        }
    }

    /// Registers a join on every dependency that is still unset. All gids
    /// must already be validated; this cannot fail partway.
    pub fn register_join(&self, join: &Arc<JoinState<T>>) {
        for &gid in &join.gids {
            let (shard, slot) = self.locate(gid);
            let mut cells = shard.lock().unwrap();
            match &mut cells[slot] {
                Cell::Set(_) => {}
                Cell::Empty { waiters } => {
                    // Incremented under the shard lock: the set that would
                    // decrement it needs this same lock to drain the waiter.
                    join.add_pending();
                    waiters.push(Waiter::Join(join.clone()));
                }
            }
        }
    }

    /// Non-blocking read of a set cell.
    pub fn peek(&self, gid: Gid) -> Result<Option<T>, EngineError> {
        self.check(gid)?;
        let (shard, slot) = self.locate(gid);
        let cells = shard.lock().unwrap();
        match &cells[slot] {
            Cell::Set(v) => Ok(Some(v.clone())),
            Cell::Empty { .. } => Ok(None),
        }
    }

    /// Gids of empty cells somebody is waiting on — the deadlock report.
    pub fn unsatisfied(&self) -> Vec<Gid> {
        let mut out = Vec::new();
        for (shard_idx, shard) in self.shards.iter().enumerate() {
            let cells = shard.lock().unwrap();
            for (slot, cell) in cells.iter().enumerate() {
                if let Cell::Empty { waiters } = cell {
                    if !waiters.is_empty() {
                        out.push(Gid((slot * SHARDS + shard_idx) as u64));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}
