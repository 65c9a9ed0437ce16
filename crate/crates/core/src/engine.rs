//! Discrete-event simulation of the remote workers.
//!
//! Workers are numbered `1..m` (machine 0 is the master and never appears in
//! an arrival set). Each round the master picks an arrival set `A_t`, the
//! delay counters are updated, the virtual clock moves to the time the master
//! stops waiting and the ledger records the messages exchanged.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ParamVector;

/// Per-worker simulation state.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    /// Machine index in `1..m`.
    pub id: usize,
    /// `grad L_j(x^{t_j})`.
    pub cached_gradient: ParamVector,
    /// The iterate `x^{t_j}` the cached gradient was taken at.
    pub anchor: ParamVector,
    /// `t_j`.
    pub last_arrival: usize,
    /// `d_j`.
    pub delay_counter: usize,
    pub busy_until: f64,
    /// Virtual seconds per gradient evaluation.
    pub compute_cost: f64,
    pub compute_time: f64,
    pub idle_time: f64,
}

impl WorkerState {
    /// A worker that has just been handed `x^0` at virtual time 0.
    pub fn new(id: usize, compute_cost: f64, x0: &ParamVector, gradient: ParamVector) -> Self {
        Self {
            id,
            cached_gradient: gradient,
            anchor: x0.clone(),
            last_arrival: 0,
            delay_counter: 0,
            busy_until: compute_cost,
            compute_cost,
            compute_time: compute_cost,
            idle_time: 0.0,
        }
    }

    pub fn utilization(&self) -> f64 {
        utilization(self.compute_time, self.idle_time)
    }
}

/// `compute / (compute + idle)`, or 1 when nothing has been recorded.
pub fn utilization(compute: f64, idle: f64) -> f64 {
    let total = compute + idle;
    if total > 0.0 {
        compute / total
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalKind {
    Synchronous,
    /// Worker `j` (1-based) arrives with probability `probs[j - 1]`.
    Bernoulli { probs: Vec<f64>, seed: u64 },
    /// Workers arrive when their simulated gradient computation finishes.
    SpeedDriven { seed: u64 },
}

/// How per-gradient compute costs are assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostModel {
    Unit,
    Uniform { low: f64, high: f64, seed: u64 },
    Fixed { costs: Vec<f64> },
}

pub const DEFAULT_SPEED_LOW: f64 = 1.0;
pub const DEFAULT_SPEED_HIGH: f64 = 10.0;

impl CostModel {
    /// Costs for workers `1..m`.
    pub fn costs(&self, remote: usize) -> Result<Vec<f64>> {
        let costs = match self {
            CostModel::Unit => vec![1.0; remote],
            CostModel::Uniform { low, high, seed } => {
                if !(low.is_finite() && high.is_finite() && *low >= 0.0 && low <= high) {
                    return Err(Error::InvalidConfig(format!("cost range [{low}, {high}] is invalid")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..remote)
                    .map(|_| if low == high { *low } else { rng.random_range(*low..*high) })
                    .collect()
            }
            CostModel::Fixed { costs } => {
                if costs.len() != remote {
                    return Err(Error::InvalidConfig(format!(
                        "{} fixed costs given for {remote} workers",
                        costs.len()
                    )));
                }
                costs.clone()
            }
        };
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidConfig("compute costs must be finite and >= 0".into()));
        }
        Ok(costs)
    }
}

/// Asynchrony model plus the delay bound `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalModel {
    #[serde(flatten)]
    pub kind: ArrivalKind,
    #[serde(default)]
    pub tau: usize,
    /// Defaults to uniform[1,10] speeds (seeded) for `SpeedDriven` and unit
    /// costs otherwise.
    #[serde(default)]
    pub costs: Option<CostModel>,
}

impl ArrivalModel {
    pub fn synchronous() -> Self {
        Self {
            kind: ArrivalKind::Synchronous,
            tau: 0,
            costs: None,
        }
    }

    pub fn bernoulli(probs: Vec<f64>, seed: u64, tau: usize) -> Self {
        Self {
            kind: ArrivalKind::Bernoulli { probs, seed },
            tau,
            costs: None,
        }
    }

    pub fn speed_driven(seed: u64, tau: usize) -> Self {
        Self {
            kind: ArrivalKind::SpeedDriven { seed },
            tau,
            costs: None,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if let ArrivalKind::Bernoulli { probs, .. } = &self.kind {
            if probs.len() != m - 1 {
                return Err(Error::InvalidConfig(format!(
                    "Bernoulli model needs one probability per remote worker ({}), got {}",
                    m - 1,
                    probs.len()
                )));
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidConfig("arrival probabilities must lie in [0, 1]".into()));
            }
        }
        self.cost_model().costs(m - 1).map(|_| ())
    }

    pub fn cost_model(&self) -> CostModel {
        match (&self.costs, &self.kind) {
            (Some(c), _) => c.clone(),
            (None, ArrivalKind::SpeedDriven { seed }) => CostModel::Uniform {
                low: DEFAULT_SPEED_LOW,
                high: DEFAULT_SPEED_HIGH,
                seed: *seed,
            },
            (None, _) => CostModel::Unit,
        }
    }

    /// Effective delay bound (0 for the synchronous model).
    pub fn effective_tau(&self) -> usize {
        match self.kind {
            ArrivalKind::Synchronous => 0,
            _ => self.tau,
        }
    }
}

/// `A_t` (remote workers only, ascending) and the virtual time at which the
/// master has all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSet {
    pub workers: Vec<usize>,
    /// Workers included only because of the delay bound.
    pub forced: Vec<usize>,
    pub time: f64,
}

impl ArrivalSet {
    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.workers.binary_search(&id).is_ok()
    }
}

/// Picks `A_t`. Workers with `d_j >= tau` are always included; at `t = 0`
/// every worker is included.
///
/// The draw is a pure function of `(model, states, t, clock)`.
pub fn draw_arrivals(model: &ArrivalModel, states: &[WorkerState], t: usize, clock: f64) -> ArrivalSet {
    let tau = model.effective_tau();
    let must_arrive = |s: &WorkerState| t == 0 || s.delay_counter >= tau;
    let forced_ids: Vec<usize> = states.iter().filter(|s| must_arrive(s)).map(|s| s.id).collect();
    let forced_time = states
        .iter()
        .filter(|s| must_arrive(s))
        .map(|s| s.busy_until)
        .fold(clock, f64::max);

    let (workers, time) = match &model.kind {
        ArrivalKind::Synchronous => (states.iter().map(|s| s.id).collect(), forced_time),
        ArrivalKind::Bernoulli { probs, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(t as u64);
            let workers: Vec<usize> = states
                .iter()
                .filter(|s| {
                    let sampled = rng.random::<f64>() < probs[s.id - 1];
                    sampled || must_arrive(s)
                })
                .map(|s| s.id)
                .collect();
            let time = states
                .iter()
                .filter(|s| workers.binary_search(&s.id).is_ok())
                .map(|s| s.busy_until)
                .fold(clock, f64::max);
            (workers, time)
        }
        ArrivalKind::SpeedDriven { .. } => {
            let mut time = forced_time;
            if forced_ids.is_empty() && !states.iter().any(|s| s.busy_until <= time) {
                time = states.iter().map(|s| s.busy_until).fold(f64::INFINITY, f64::min);
            }
            let workers = states.iter().filter(|s| s.busy_until <= time).map(|s| s.id).collect();
            (workers, time)
        }
    };
    let forced = forced_ids
        .into_iter()
        .filter(|id| match &model.kind {
            ArrivalKind::Synchronous => false,
            _ => workers.binary_search(id).is_ok(),
        })
        .collect();
    ArrivalSet {
        workers,
        forced,
        time: if time.is_finite() { time } else { clock },
    }
}

/// `d_j = 0` and `t_j = t` for arrived workers, `d_j + 1` otherwise.
pub fn update_delay_counters(states: &mut [WorkerState], arrivals: &ArrivalSet, t: usize) {
    for s in states.iter_mut() {
        if arrivals.contains(s.id) {
            s.delay_counter = 0;
            s.last_arrival = t;
        } else {
            s.delay_counter += 1;
        }
    }
}

/// Asserts `t - t_j <= tau` for every worker.
pub fn check_bounded_delay(states: &[WorkerState], t: usize, tau: usize) -> Result<()> {
    match states.iter().find(|s| t - s.last_arrival > tau) {
        Some(s) => Err(Error::BoundedDelay {
            t,
            worker: s.id,
            last_arrival: s.last_arrival,
            tau,
        }),
        None => Ok(()),
    }
}

/// Per-worker `(compute, idle)` increments of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTableDelta {
    pub per_worker: Vec<(f64, f64)>,
    pub clock: f64,
}

/// Moves the clock to `arrivals.time`, charges the master's solve and
/// restarts every arrived worker on the new broadcast.
///
/// Arrived workers are idle from the end of their computation until the
/// broadcast; everyone else keeps computing.
pub fn advance_clock(states: &mut [WorkerState], arrivals: &ArrivalSet, master_cost: f64) -> TimeTableDelta {
    let now = arrivals.time;
    let broadcast = now + master_cost;
    let per_worker = states
        .iter_mut()
        .map(|s| {
            if !arrivals.contains(s.id) {
                return (0.0, 0.0);
            }
            let idle = (broadcast - s.busy_until).max(0.0);
            s.idle_time += idle;
            s.compute_time += s.compute_cost;
            s.busy_until = broadcast + s.compute_cost;
            (s.compute_cost, idle)
        })
        .collect();
    TimeTableDelta {
        per_worker,
        clock: broadcast,
    }
}

/// Message counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    /// Worker to master gradient messages.
    pub uploads: u64,
    /// Master to worker iterate broadcasts.
    pub downloads: u64,
    pub rounds: u64,
}

pub fn record_comm(ledger: &mut CommLedger, arrivals: &[usize], free_workers: &[usize]) {
    ledger.uploads += arrivals.len() as u64;
    ledger.downloads += free_workers.len() as u64;
    ledger.rounds += 1;
}

/// SHA-256 of the little-endian bytes of `x`.
pub fn iterate_hash(x: &ParamVector) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in x.iter() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

/// One round of the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub t: u64,
    pub arrivals: Vec<u32>,
    /// `d_j` after the update, for workers `1..m`.
    pub delays: Vec<u32>,
    /// Hash of the iterate `x^t` the arrived gradients were taken at.
    pub x_hash: [u8; 32],
}

const EVENT_MAGIC: &[u8; 4] = b"EDL1";

/// Append-only binary log: magic, then per record `t: u64`, `|A_t|: u32`,
/// ids, `m-1: u32`, counters, 32-byte hash. All little-endian.
pub struct EventLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EventLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(EVENT_MAGIC).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<()> {
        let mut buf = Vec::with_capacity(48 + 4 * (record.arrivals.len() + record.delays.len()));
        buf.extend_from_slice(&record.t.to_le_bytes());
        buf.extend_from_slice(&(record.arrivals.len() as u32).to_le_bytes());
        for a in &record.arrivals {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        buf.extend_from_slice(&(record.delays.len() as u32).to_le_bytes());
        for d in &record.delays {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&record.x_hash);
        self.out.write_all(&buf).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_event_log(path: &Path) -> Result<Vec<EventRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != EVENT_MAGIC {
        return Err(bad("missing EDL1 magic"));
    }
    let mut cursor = Cursor { bytes: &bytes, pos: 4 };
    let mut records = Vec::new();
    while cursor.pos < bytes.len() {
        let parsed = (|| {
            let t = u64::from_le_bytes(cursor.take(8)?.try_into().ok()?);
            let arrivals = cursor.take_u32s()?;
            let delays = cursor.take_u32s()?;
            let x_hash: [u8; 32] = cursor.take(32)?.try_into().ok()?;
            Some(EventRecord {
                t,
                arrivals,
                delays,
                x_hash,
            })
        })();
        records.push(parsed.ok_or_else(|| bad("truncated record"))?);
    }
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(slice)
    }

    fn take_u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn take_u32s(&mut self) -> Option<Vec<u32>> {
        let n = self.take_u32()? as usize;
        (0..n).map(|_| self.take_u32()).collect()
    }
}

/// Recomputes `t - t_j` from logged arrival sets and checks it never exceeds
/// `tau`. Also checks the logged counters agree with the arrival sets.
pub fn replay_bounded_delay(records: &[EventRecord], remote: usize, tau: usize) -> Result<usize> {
    let mut last = vec![0u64; remote];
    let mut max_staleness = 0;
    for r in records {
        for &a in &r.arrivals {
            let idx = (a as usize)
                .checked_sub(1)
                .filter(|&i| i < remote)
                .ok_or_else(|| Error::InvalidConfig(format!("worker id {a} out of range")))?;
            last[idx] = r.t;
        }
        for (idx, &tj) in last.iter().enumerate() {
            let staleness = (r.t - tj) as usize;
            if staleness > tau {
                return Err(Error::BoundedDelay {
                    t: r.t as usize,
                    worker: idx + 1,
                    last_arrival: tj as usize,
                    tau,
                });
            }
            if r.delays.get(idx).map(|&d| d as usize) != Some(staleness) {
                return Err(Error::InvalidConfig(format!(
                    "logged delay counter of worker {} at t={} disagrees with arrivals",
                    idx + 1,
                    r.t
                )));
            }
            max_staleness = max_staleness.max(staleness);
        }
    }
    Ok(max_staleness)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn workers(costs: &[f64]) -> Vec<WorkerState> {
        let x0 = ParamVector::zeros(1);
        costs
            .iter()
            .enumerate()
            .map(|(k, &c)| WorkerState::new(k + 1, c, &x0, ParamVector::zeros(1)))
            .collect()
    }

    fn step(model: &ArrivalModel, states: &mut [WorkerState], t: usize, clock: f64) -> (ArrivalSet, f64) {
        let set = draw_arrivals(model, states, t, clock);
        update_delay_counters(states, &set, t);
        let delta = advance_clock(states, &set, 0.0);
        (set, delta.clock)
    }

    #[test]
    fn tau_zero_is_synchronous() {
        let model = ArrivalModel::bernoulli(vec![0.0, 0.1, 0.9], 5, 0);
        let mut states = workers(&[1.0; 3]);
        let mut clock = 0.0;
        for t in 0..20 {
            let (set, c) = step(&model, &mut states, t, clock);
            clock = c;
            assert_eq!(set.workers, vec![1, 2, 3]);
        }
    }

    #[test]
    fn never_arriving_workers_are_forced_every_tau_plus_one() {
        let model = ArrivalModel::bernoulli(vec![0.0, 0.0], 1, 2);
        let mut states = workers(&[1.0, 1.0]);
        let mut counters = Vec::new();
        let mut arrived_at = Vec::new();
        for t in 0..9 {
            let (set, _) = step(&model, &mut states, t, 0.0);
            if !set.is_empty() {
                arrived_at.push(t);
            }
            counters.push(states[0].delay_counter);
            check_bounded_delay(&states, t, 2).unwrap();
        }
        assert_eq!(arrived_at, vec![0, 3, 6]);
        assert_eq!(counters, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn certain_arrivals_keep_counters_at_zero() {
        let model = ArrivalModel::bernoulli(vec![1.0; 4], 9, 3);
        let mut states = workers(&[1.0; 4]);
        for t in 0..10 {
            let (set, _) = step(&model, &mut states, t, 0.0);
            assert_eq!(set.workers, vec![1, 2, 3, 4]);
            assert!(states.iter().all(|s| s.delay_counter == 0));
        }
    }

    #[test]
    fn absent_worker_counts_up() {
        let mut states = workers(&[1.0, 1.0]);
        let only_first = ArrivalSet {
            workers: vec![1],
            forced: vec![],
            time: 0.0,
        };
        for t in 1..=3 {
            update_delay_counters(&mut states, &only_first, t);
        }
        assert_eq!(states[1].delay_counter, 3);
        assert_eq!(states[0].delay_counter, 0);
        assert_eq!(states[0].last_arrival, 3);
        assert!(check_bounded_delay(&states, 3, 5).is_ok());
        assert!(matches!(
            check_bounded_delay(&states, 3, 2),
            Err(Error::BoundedDelay { worker: 2, .. })
        ));
    }

    #[test]
    fn draws_are_deterministic() {
        let model = ArrivalModel::bernoulli(vec![0.3; 6], 77, 4);
        let mut a = workers(&[1.0; 6]);
        let mut b = workers(&[1.0; 6]);
        for t in 0..50 {
            assert_eq!(step(&model, &mut a, t, 0.0).0, step(&model, &mut b, t, 0.0).0);
        }
    }

    #[test]
    fn homogeneous_synchronous_has_no_idle_time() {
        let model = ArrivalModel::synchronous();
        let mut states = workers(&[2.0; 3]);
        let mut clock = 0.0;
        for t in 0..10 {
            clock = step(&model, &mut states, t, clock).1;
        }
        assert!(states.iter().all(|s| s.idle_time == 0.0));
        assert_eq!(clock, 20.0);
    }

    #[test]
    fn fast_worker_idles_nine_per_round() {
        let model = ArrivalModel::synchronous();
        let mut states = workers(&[1.0, 10.0]);
        let mut clock = 0.0;
        for t in 0..5 {
            let set = draw_arrivals(&model, &states, t, clock);
            update_delay_counters(&mut states, &set, t);
            let delta = advance_clock(&mut states, &set, 0.0);
            assert_eq!(delta.per_worker, vec![(1.0, 9.0), (10.0, 0.0)]);
            clock = delta.clock;
        }
    }

    #[test]
    fn speed_driven_waits_for_first_finisher() {
        let model = ArrivalModel {
            kind: ArrivalKind::SpeedDriven { seed: 0 },
            tau: 5,
            costs: Some(CostModel::Fixed { costs: vec![1.0, 3.0] }),
        };
        let mut states = workers(&[1.0, 3.0]);
        let (first, clock) = step(&model, &mut states, 0, 0.0);
        assert_eq!(first.workers, vec![1, 2]);
        assert_eq!(clock, 3.0);
        let (second, clock) = step(&model, &mut states, 1, clock);
        assert_eq!(second.workers, vec![1]);
        assert_eq!(clock, 4.0);
    }

    #[test]
    fn ledger_deltas() {
        let mut ledger = CommLedger::default();
        record_comm(&mut ledger, &[1, 2, 3], &[1, 2, 3, 4, 5]);
        assert_eq!((ledger.uploads, ledger.downloads, ledger.rounds), (3, 5, 1));
    }

    #[test]
    fn uniform_costs_lie_in_range() {
        let costs = CostModel::Uniform {
            low: 1.0,
            high: 10.0,
            seed: 4,
        }
        .costs(100)
        .unwrap();
        assert!(costs.iter().all(|c| (1.0..10.0).contains(c)));
    }

    #[test]
    fn event_log_round_trip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.bin");
        let model = ArrivalModel::bernoulli(vec![0.2, 0.5, 0.5], 3, 2);
        let mut states = workers(&[1.0; 3]);
        let mut writer = EventLogWriter::create(&path).unwrap();
        let mut expected = Vec::new();
        for t in 0..40 {
            let (set, _) = step(&model, &mut states, t, 0.0);
            let rec = EventRecord {
                t: t as u64,
                arrivals: set.workers.iter().map(|&w| w as u32).collect(),
                delays: states.iter().map(|s| s.delay_counter as u32).collect(),
                x_hash: iterate_hash(&ParamVector::from_element(2, t as f64)),
            };
            writer.append(&rec).unwrap();
            expected.push(rec);
        }
        writer.finish().unwrap();
        let back = read_event_log(&path).unwrap();
        assert_eq!(back, expected);
        assert!(replay_bounded_delay(&back, 3, 2).unwrap() <= 2);
        assert!(replay_bounded_delay(&back, 3, 0).is_err());
    }
}
