//! Engine counters and the spawn-latency histogram.
//!
//! Counters are sharded per worker (cache-line aligned) so the hot paths
//! never contend on a shared line; totals are summed on demand. The latency
//! histogram uses logarithmic buckets with 16 sub-buckets per octave
//! (~6% value resolution), which is plenty for microsecond-scale medians.

use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

/// Snapshot of engine activity. At quiescence `tasks_completed` equals
/// `tasks_spawned` and `suspensions <= gets` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineStats {
    pub tasks_spawned: u64,
    pub tasks_completed: u64,
    /// Gets that found their cell empty and parked a continuation.
    pub suspensions: u64,
    pub sets: u64,
    pub gets: u64,
    pub spawn_overhead: HistogramSummary,
}

impl EngineStats {
    /// Flat `key=value` lines, one per counter, for CLI output.
    pub fn to_kv(&self) -> String {
        format!(
            "tasks_spawned={}\ntasks_completed={}\nsuspensions={}\nsets={}\ngets={}\n\
             spawn_overhead_median_ns={}\nspawn_overhead_p95_ns={}\nspawn_overhead_samples={}\n",
            self.tasks_spawned,
            self.tasks_completed,
            self.suspensions,
            self.sets,
            self.gets,
            self.spawn_overhead.median_ns,
            self.spawn_overhead.p95_ns,
            self.spawn_overhead.samples,
        )
    }
}

/// Median and 95th percentile of sampled spawn latencies, in nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HistogramSummary {
    pub samples: u64,
    pub median_ns: u64,
    pub p95_ns: u64,
}

/// One worker's counters, padded to a cache line.
#[repr(align(64))]
#[derive(Default)]
pub(crate) struct CounterCell {
    pub spawned: AtomicU64,
    pub completed: AtomicU64,
    pub suspensions: AtomicU64,
    pub sets: AtomicU64,
    pub gets: AtomicU64,
    /// Rolling tick used to sample spawn latencies (1 in 16).
    pub tick: AtomicU64,
}

/// Per-worker counter cells plus one trailing cell for calls made from
/// outside any worker (the driving thread).
pub(crate) struct CounterSet {
    cells: Vec<CounterCell>,
}

impl CounterSet {
    pub fn new(workers: usize) -> Self {
        CounterSet { cells: (0..=workers).map(|_| CounterCell::default()).collect() }
    }

    pub fn cell(&self, slot: usize) -> &CounterCell {
        &self.cells[slot]
    }

    pub fn sum(&self, field: impl Fn(&CounterCell) -> &AtomicU64) -> u64 {
        self.cells.iter().map(|c| field(c).load(Relaxed)).sum()
    }
}

const SUB_BITS: u32 = 4;
const SUBS: usize = 1 << SUB_BITS; // 16 sub-buckets per octave
const BUCKETS: usize = SUBS + (64 - SUB_BITS as usize) * SUBS;

/// Lock-free log-bucketed histogram of nanosecond latencies.
pub(crate) struct LatencyHistogram {
    buckets: Vec<AtomicU64>,
}

impl LatencyHistogram {
    pub fn new() -> Self {
        LatencyHistogram { buckets: (0..BUCKETS).map(|_| AtomicU64::new(0)).collect() }
    }

    fn index(ns: u64) -> usize {
        if ns < SUBS as u64 {
            return ns as usize;
        }
        let e = 63 - ns.leading_zeros(); // >= SUB_BITS
        let sub = ((ns >> (e - SUB_BITS)) & (SUBS as u64 - 1)) as usize;
        SUBS + (e - SUB_BITS) as usize * SUBS + sub
    }

    /// Representative (midpoint) value for a bucket index.
    fn value(idx: usize) -> u64 {
        if idx < SUBS {
            return idx as u64;
        }
        let e = SUB_BITS + ((idx - SUBS) / SUBS) as u32;
        let sub = ((idx - SUBS) % SUBS) as u64;
        let low = (SUBS as u64 + sub) << (e - SUB_BITS);
        low + (1u64 << (e - SUB_BITS)) / 2
    }

    pub fn record(&self, ns: u64) {
        self.buckets[Self::index(ns)].fetch_add(1, Relaxed);
    }

    pub fn summary(&self) -> HistogramSummary {
        let counts: Vec<u64> = self.buckets.iter().map(|b| b.load(Relaxed)).collect();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return HistogramSummary::default();
        }
        let quantile = |q: f64| -> u64 {
            let rank = ((total as f64 * q).ceil() as u64).max(1);
            let mut seen = 0;
            for (idx, &c) in counts.iter().enumerate() {
                seen += c;
                if seen >= rank {
                    return Self::value(idx);
                }
            }
            Self::value(BUCKETS - 1)
        };
        HistogramSummary { samples: total, median_ns: quantile(0.5), p95_ns: quantile(0.95) }
    }
}
