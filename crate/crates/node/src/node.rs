//! One peer's training loop.
//!
//! Each iteration `t`:
//! 1. snapshot θ, compute `n_inferences` projected gradients with seeds `(self_time, t, k)`;
//! 2. broadcast `SYNC(0, t)` and wait for every member (up to `T_timeout` from the
//!    iteration start), dropping silent peers;
//! 3. request every member's gradients and wait up to `T_apply_grads`;
//! 4. broadcast `RECEIVED_SET(t)` and apply the intersection of all received sets,
//!    so a lost response leaves every replica with the same ledger;
//! 5. restore the snapshot, apply the ledger in machine-key order, advance `cur_iter`;
//! 6. broadcast `SYNC(1, t)`, wait, then compare the checksum with a random peer.
//!
//! Requests from peers (gradients, checksums, weights, history, joins) are
//! answered from inside every wait, so no peer blocks on a busy node.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use onebyte_core::codec::{encode, CompandRange};
use onebyte_core::params::{checksum, Digest32, ParameterVector};
use onebyte_core::rng::{derive_seed, mix_triple, SplitMix64};
use onebyte_core::spsa::{apply_ledger, apply_ledger_at, projected_gradient, EtaSchedule, GradientLedger, MachineKey, Snapshot, SpsaError};
use onebyte_core::tasks::{Batch, Task};
use onebyte_core::wire::{GradPayload, LedgerRecord, Message, PeerEntry, RecordEntry, SyncPhase};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::meter::MeterSnapshot;
use crate::metrics::IterationMetrics;
use crate::registry::PeerRegistry;
use crate::transport::{Incoming, Transport};

const POLL: Duration = Duration::from_millis(2);
const MAX_ATTEMPTS: u64 = 4;
const FETCH_ROUNDS: usize = 8;
const MAX_HISTORY_RECORDS: usize = 1024;
const RETRY_DOMAIN: u64 = 0x5EED_0000_0000_0001;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Spsa(#[from] SpsaError),
    #[error("join failed: {0}")]
    Join(String),
    #[error("history window exceeded: wanted iteration {wanted}, oldest available {oldest}")]
    Refetch { wanted: u64, oldest: u64 },
    #[error("crashed by fault injection")]
    Crashed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Founded,
    WeightsFetched { chunks: usize, oldest: u64, newest: u64 },
    HistoryApplied { records: usize },
    HistoryWindowExceeded { wanted: u64, oldest: u64 },
    DownloadFinished,
    Admitted { start_iter: u64 },
    JoinVerified { matched: bool },
    PeerAdded { peer: MachineKey, start_iter: u64 },
    PeerDropped { peer: MachineKey, phase: &'static str },
    GradientsExcluded { peer: MachineKey },
    NonFiniteLoss { slot: u64, attempt: u64 },
    SlotAbandoned { slot: u64 },
    ChecksumMatch { peer: String },
    ChecksumMismatch { peer: String },
    ChecksumUnanswered { peer: String },
    MajorityAgrees,
    Resynced { iteration: u64 },
    Isolated,
    RejoinFailed { reason: String },
    Stalled { ms: u64 },
    Corrupted,
    Crashed,
    Finished,
    Fault { reason: String },
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use EventKind::*;
        match self {
            Founded => write!(f, "founded"),
            WeightsFetched { chunks, oldest, newest } => write!(f, "weights_fetched chunks={chunks} oldest={oldest} newest={newest}"),
            HistoryApplied { records } => write!(f, "history_applied records={records}"),
            HistoryWindowExceeded { wanted, oldest } => write!(f, "history_window_exceeded wanted={wanted} oldest={oldest}"),
            DownloadFinished => write!(f, "download_finished"),
            Admitted { start_iter } => write!(f, "admitted start_iter={start_iter}"),
            JoinVerified { matched } => write!(f, "join_verified matched={matched}"),
            PeerAdded { peer, start_iter } => write!(f, "peer_added {peer} start_iter={start_iter}"),
            PeerDropped { peer, phase } => write!(f, "peer_dropped {peer} phase={phase}"),
            GradientsExcluded { peer } => write!(f, "gradients_excluded {peer}"),
            NonFiniteLoss { slot, attempt } => write!(f, "non_finite_loss slot={slot} attempt={attempt}"),
            SlotAbandoned { slot } => write!(f, "slot_abandoned slot={slot}"),
            ChecksumMatch { peer } => write!(f, "checksum_match {peer}"),
            ChecksumMismatch { peer } => write!(f, "checksum_mismatch {peer}"),
            ChecksumUnanswered { peer } => write!(f, "checksum_unanswered {peer}"),
            MajorityAgrees => write!(f, "majority_agrees"),
            Resynced { iteration } => write!(f, "resynced iteration={iteration}"),
            Isolated => write!(f, "isolated"),
            RejoinFailed { reason } => write!(f, "rejoin_failed {reason}"),
            Stalled { ms } => write!(f, "stalled ms={ms}"),
            Corrupted => write!(f, "corrupted"),
            Crashed => write!(f, "crashed"),
            Finished => write!(f, "finished"),
            Fault { reason } => write!(f, "fault {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    /// Milliseconds since the Unix epoch.
    pub unix_ms: u64,
    pub iteration: u64,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} iter={} {}", self.unix_ms, self.iteration, self.kind)
    }
}

/// Fault injection and progress reporting used by the harness.
#[derive(Debug, Clone, Default)]
pub struct NodeHooks {
    /// Stop dead at the start of this iteration.
    pub crash_at: Option<u64>,
    /// Sleep without answering anything at the start of this iteration.
    pub stall_at: Option<(u64, Duration)>,
    /// Flip one bit of θ at the start of this iteration.
    pub corrupt_at: Option<u64>,
    /// When joining, wait until the network has advanced this many
    /// iterations past the downloaded weights before replaying history.
    pub download_lag: u64,
    /// Receives `cur_iter` after every change.
    pub progress: Option<Arc<AtomicU64>>,
    /// Set externally to abort the node as if it crashed.
    pub stop: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Finished,
    Crashed,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct NodeReport {
    pub key: MachineKey,
    pub outcome: Outcome,
    pub cur_iter: u64,
    pub theta: ParameterVector,
    pub digest: Digest32,
    pub metrics: Vec<IterationMetrics>,
    pub events: Vec<Event>,
    pub meter: MeterSnapshot,
    pub live_peers: Vec<MachineKey>,
    /// (iteration, Unix ms) at which each iteration finished on this node.
    pub completions: Vec<(u64, u64)>,
}

/// Builds the ledger a history record describes.
pub fn ledger_from_record(record: &LedgerRecord, quantizer: Option<&CompandRange>) -> Result<GradientLedger, String> {
    let mut ledger = GradientLedger::new(record.iteration);
    for e in &record.entries {
        let values = payload_values(&e.grads, quantizer)?;
        ledger
            .insert_values(MachineKey::new(e.machine_time, e.address.clone()), values)
            .map_err(|err| err.to_string())?;
    }
    Ok(ledger)
}

fn payload_values(p: &GradPayload, quantizer: Option<&CompandRange>) -> Result<Vec<f32>, String> {
    match (p, quantizer) {
        (GradPayload::OneByte(_), Some(r)) => Ok(p.values(r)),
        (GradPayload::F32(v), None) => Ok(v.clone()),
        _ => Err("gradient mode does not match the run configuration".into()),
    }
}

/// One machine's projected gradients for iteration `t`, computed in slot
/// order on `theta` (which the perturbations leave within rounding of its
/// input). A slot whose loss is non-finite is retried on a fresh batch with
/// the same seed; after the last attempt the slot and every later one are
/// skipped, since receivers derive seeds from list positions.
pub fn compute_gradients(
    task: &Task,
    theta: &mut [f32],
    cfg: &RunConfig,
    shard: u64,
    machine_time: u64,
    t: u64,
    mut note: impl FnMut(EventKind),
) -> Result<Vec<f64>, NodeError> {
    let n = cfg.n_inferences as u64;
    let mut values = Vec::with_capacity(n as usize);
    'slots: for k in 0..n {
        let seed = derive_seed(machine_time, t, k);
        for attempt in 0..MAX_ATTEMPTS {
            let batch_id = if attempt == 0 {
                t * n + k
            } else {
                mix_triple(t ^ RETRY_DOMAIN, k, attempt)
            };
            let batch = task.batch(shard, batch_id);
            match projected_gradient(task, theta, &batch, cfg.epsilon, seed) {
                Ok(g) if (g.value as f32).is_finite() => {
                    values.push(g.value);
                    continue 'slots;
                }
                Ok(_) | Err(SpsaError::NonFiniteLoss { .. }) => note(EventKind::NonFiniteLoss { slot: k, attempt }),
                Err(e) => return Err(e.into()),
            }
        }
        note(EventKind::SlotAbandoned { slot: k });
        break;
    }
    Ok(values)
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct WeightsChunk {
    from: String,
    iteration: u64,
    offset: u64,
    values: Vec<f32>,
}

pub struct Node {
    cfg: RunConfig,
    task: Task,
    eval: Batch,
    quantizer: Option<CompandRange>,
    eta: EtaSchedule,
    me: MachineKey,
    transport: Box<dyn Transport>,
    hooks: NodeHooks,
    bootstraps: Vec<String>,
    registry: PeerRegistry,
    known_peers: BTreeSet<String>,
    started: bool,

    theta: ParameterVector,
    clean: ParameterVector,
    cur_iter: u64,
    own_grads: BTreeMap<u64, GradPayload>,
    history: VecDeque<LedgerRecord>,
    digests: BTreeMap<u64, Digest32>,

    synced: BTreeMap<(SyncPhase, u64), BTreeSet<String>>,
    grads_in: BTreeMap<u64, BTreeMap<String, (u64, GradPayload)>>,
    sets_in: BTreeMap<u64, BTreeMap<String, BTreeSet<MachineKey>>>,
    checksums_in: BTreeMap<(String, u64), Digest32>,
    weights_in: Vec<WeightsChunk>,
    history_in: Vec<(String, Vec<LedgerRecord>)>,
    peer_lists_in: Vec<(String, u64, Vec<PeerEntry>)>,
    pending_grads: Vec<(String, u64)>,
    pending_checksums: Vec<(String, u64)>,

    rng: SplitMix64,
    started_at: Instant,
    events: Vec<Event>,
    metrics: Vec<IterationMetrics>,
    last_meter: MeterSnapshot,
    completions: Vec<(u64, u64)>,
}

impl Node {
    /// `bootstraps` empty means this node founds the network.
    pub fn new(
        cfg: RunConfig,
        machine_time: u64,
        transport: Box<dyn Transport>,
        bootstraps: Vec<String>,
        hooks: NodeHooks,
    ) -> Result<Self, NodeError> {
        cfg.validate()?;
        let task = cfg.build_task()?;
        let eval = task.eval_batch();
        let me = MachineKey::new(machine_time, transport.address().to_string());
        let registry = PeerRegistry::new(me.clone(), 0);
        let dim = task.dim();
        Ok(Self {
            quantizer: cfg.quantizer(),
            eta: cfg.eta_schedule(),
            rng: SplitMix64::new(mix_triple(machine_time, 0xC4EC, 0)),
            cfg,
            task,
            eval,
            me,
            transport,
            hooks,
            bootstraps,
            registry,
            known_peers: BTreeSet::new(),
            started: false,
            theta: ParameterVector::zeros(dim),
            clean: ParameterVector::zeros(dim),
            cur_iter: 0,
            own_grads: BTreeMap::new(),
            history: VecDeque::new(),
            digests: BTreeMap::new(),
            synced: BTreeMap::new(),
            grads_in: BTreeMap::new(),
            sets_in: BTreeMap::new(),
            checksums_in: BTreeMap::new(),
            weights_in: Vec::new(),
            history_in: Vec::new(),
            peer_lists_in: Vec::new(),
            pending_grads: Vec::new(),
            pending_checksums: Vec::new(),
            started_at: Instant::now(),
            events: Vec::new(),
            metrics: Vec::new(),
            last_meter: MeterSnapshot::default(),
            completions: Vec::new(),
        })
    }

    pub fn key(&self) -> &MachineKey {
        &self.me
    }

    /// Connects, trains to `max_iter`, lingers for the final barrier and reports.
    pub fn run(mut self) -> NodeReport {
        self.started_at = Instant::now();
        let result = self.connect().and_then(|_| self.train());
        let outcome = match result {
            Ok(()) => {
                self.linger();
                self.event(EventKind::Finished);
                Outcome::Finished
            }
            Err(NodeError::Crashed) => {
                self.event(EventKind::Crashed);
                Outcome::Crashed
            }
            Err(e) => {
                self.event(EventKind::Fault { reason: e.to_string() });
                Outcome::Failed(e.to_string())
            }
        };
        self.fold_trailing_traffic();
        let meter = self.transport.meter().snapshot();
        NodeReport {
            key: self.me.clone(),
            outcome,
            cur_iter: self.cur_iter,
            digest: checksum(self.cur_iter, &self.clean),
            theta: self.clean,
            metrics: self.metrics,
            events: self.events,
            meter,
            live_peers: self.registry.members().map(|m| m.key.clone()).collect(),
            completions: self.completions,
        }
    }

    fn event(&mut self, kind: EventKind) {
        tracing::debug!(node = %self.me, iter = self.cur_iter, "{kind}");
        self.events.push(Event {
            unix_ms: unix_ms(),
            iteration: self.cur_iter,
            kind,
        });
    }

    fn publish_progress(&self) {
        if let Some(p) = &self.hooks.progress {
            p.store(self.cur_iter, Ordering::SeqCst);
        }
    }

    fn stopped(&self) -> bool {
        self.hooks.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst))
    }

    // ---- messaging ----

    fn send(&mut self, to: &str, msg: &Message) {
        tracing::trace!(node = %self.me, %to, ?msg, "send");
        if let Err(e) = self.transport.send(to, msg) {
            tracing::debug!(node = %self.me, %to, error = %e, "send failed");
        }
    }

    fn broadcast(&mut self, to: &[String], msg: &Message) {
        for p in to {
            self.send(p, msg);
        }
    }

    fn pump(&mut self, timeout: Duration) {
        if let Some(inc) = self.transport.recv_timeout(timeout) {
            self.handle(inc);
            while let Some(inc) = self.transport.recv_timeout(Duration::ZERO) {
                self.handle(inc);
            }
        }
    }

    fn wait_until(&mut self, deadline: Instant, mut done: impl FnMut(&Self) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline || self.stopped() {
                // Messages may have queued up while this thread was descheduled.
                self.pump(Duration::ZERO);
                return done(self);
            }
            self.pump((deadline - now).min(POLL));
        }
    }

    fn handle(&mut self, Incoming { from, msg }: Incoming) {
        tracing::trace!(node = %self.me, %from, ?msg, "recv");
        match msg {
            Message::Join { .. } => {
                let reply = Message::PeerList {
                    cur_iter: self.cur_iter,
                    peers: self.registry.entries(),
                };
                self.send(&from, &reply);
            }
            Message::PeerList { cur_iter, peers } => self.peer_lists_in.push((from, cur_iter, peers)),
            Message::AnnouncePeer {
                machine_time,
                address,
                start_iter,
            } => {
                let key = MachineKey::new(machine_time, address.clone());
                if start_iter == 0 && from == address {
                    // A joiner asking this node to admit it.
                    let start = if self.started { self.cur_iter + 2 } else { 0 };
                    self.admit(key, start);
                    let forward = Message::AnnouncePeer {
                        machine_time,
                        address: address.clone(),
                        start_iter: start,
                    };
                    let others: Vec<String> = self.registry.others().into_iter().filter(|a| *a != address).collect();
                    self.broadcast(&others, &forward);
                    let ack = Message::PeerList {
                        cur_iter: start,
                        peers: self.registry.entries(),
                    };
                    self.send(&from, &ack);
                } else {
                    self.admit(key, start_iter);
                }
            }
            Message::Sync { phase, iteration, .. } => {
                self.synced.entry((phase, iteration)).or_default().insert(from);
            }
            Message::GradsRequest { iteration } => {
                if let Some(p) = self.own_grads.get(&iteration).cloned() {
                    let reply = Message::GradsResponse {
                        iteration,
                        machine_time: self.me.time,
                        grads: p,
                    };
                    self.send(&from, &reply);
                } else if iteration >= self.cur_iter {
                    self.pending_grads.push((from, iteration));
                }
            }
            Message::GradsResponse {
                iteration,
                machine_time,
                grads,
            } => {
                let mode_ok = matches!(
                    (&grads, self.quantizer.is_some()),
                    (GradPayload::OneByte(_), true) | (GradPayload::F32(_), false)
                );
                if !mode_ok || grads.len() > self.cfg.n_inferences {
                    self.event(EventKind::Fault {
                        reason: format!("malformed gradients from {from}"),
                    });
                    return;
                }
                self.grads_in.entry(iteration).or_default().insert(from, (machine_time, grads));
            }
            Message::ChecksumRequest { iteration } => {
                if let Some(d) = self.digests.get(&iteration).copied() {
                    self.send(&from, &Message::ChecksumResponse { iteration, digest: d });
                } else if iteration > self.cur_iter {
                    self.pending_checksums.push((from, iteration));
                }
            }
            Message::ChecksumResponse { iteration, digest } => {
                self.checksums_in.insert((from, iteration), digest);
            }
            Message::WeightsRequest { offset, length } => {
                let d = self.clean.len() as u64;
                let lo = (offset / 4).min(d) as usize;
                let hi = (offset.saturating_add(length) / 4).min(d) as usize;
                let values = if offset % 4 == 0 && length % 4 == 0 {
                    self.clean[lo..hi.max(lo)].to_vec()
                } else {
                    Vec::new()
                };
                let reply = Message::WeightsResponse {
                    iteration: self.cur_iter,
                    offset,
                    values,
                };
                self.send(&from, &reply);
            }
            Message::WeightsResponse {
                iteration,
                offset,
                values,
            } => self.weights_in.push(WeightsChunk {
                from,
                iteration,
                offset,
                values,
            }),
            Message::HistoryRequest { from_iter, to_iter } => {
                let records: Vec<LedgerRecord> = self
                    .history
                    .iter()
                    .filter(|r| r.iteration >= from_iter && r.iteration < to_iter)
                    .take(MAX_HISTORY_RECORDS)
                    .cloned()
                    .collect();
                self.send(&from, &Message::HistoryResponse { records });
            }
            Message::HistoryResponse { records } => self.history_in.push((from, records)),
            Message::ReceivedSet { iteration, members } => {
                let set = members
                    .into_iter()
                    .map(|p| MachineKey::new(p.machine_time, p.address))
                    .collect();
                self.sets_in.entry(iteration).or_default().insert(from, set);
            }
            Message::Hello { .. } => {}
        }
    }

    fn admit(&mut self, key: MachineKey, start_iter: u64) {
        if self.registry.admit(key.clone(), start_iter) {
            self.known_peers.insert(key.address.clone());
            self.event(EventKind::PeerAdded { peer: key, start_iter });
        }
    }

    fn drop_peer(&mut self, address: &str, phase: &'static str) {
        if let Some(m) = self.registry.remove(address) {
            self.event(EventKind::PeerDropped { peer: m.key, phase });
        }
    }

    fn serve_pending(&mut self) {
        let grads = std::mem::take(&mut self.pending_grads);
        for (from, it) in grads {
            match self.own_grads.get(&it).cloned() {
                Some(p) => {
                    let reply = Message::GradsResponse {
                        iteration: it,
                        machine_time: self.me.time,
                        grads: p,
                    };
                    self.send(&from, &reply);
                }
                None if it >= self.cur_iter => self.pending_grads.push((from, it)),
                None => {}
            }
        }
        let sums = std::mem::take(&mut self.pending_checksums);
        for (from, it) in sums {
            match self.digests.get(&it).copied() {
                Some(d) => self.send(&from, &Message::ChecksumResponse { iteration: it, digest: d }),
                None if it > self.cur_iter => self.pending_checksums.push((from, it)),
                None => {}
            }
        }
    }

    // ---- state ----

    fn set_state(&mut self, iteration: u64, theta: ParameterVector) {
        self.cur_iter = iteration;
        self.digests.insert(iteration, checksum(iteration, &theta));
        self.clean = theta.clone();
        self.theta = theta;
        let keep = self.cfg.history_window as u64 + 2;
        while self.digests.len() as u64 > keep {
            self.digests.pop_first();
        }
        self.publish_progress();
        self.serve_pending();
    }

    fn push_history(&mut self, record: LedgerRecord) {
        self.history.push_back(record);
        while self.history.len() > self.cfg.history_window {
            self.history.pop_front();
        }
    }

    /// Applies a history record on top of the clean state at `cur_iter`.
    fn apply_record(&mut self, record: LedgerRecord) -> Result<(), NodeError> {
        debug_assert_eq!(record.iteration, self.cur_iter);
        let ledger = ledger_from_record(&record, self.quantizer.as_ref()).map_err(NodeError::Join)?;
        let mut theta = self.clean.clone();
        if !ledger.is_empty() {
            apply_ledger(&mut theta, &ledger, self.eta.eta(ledger.total(), record.iteration))?;
        }
        self.push_history(record);
        self.set_state(self.cur_iter + 1, theta);
        Ok(())
    }

    // ---- joining ----

    fn connect(&mut self) -> Result<(), NodeError> {
        if self.bootstraps.is_empty() {
            let init = self.task.init_params(self.cfg.init_seed);
            self.set_state(0, init);
            self.event(EventKind::Founded);
        } else {
            let boots = self.bootstraps.clone();
            self.join_network(&boots)?;
        }
        if self.cur_iter == 0 {
            let deadline = Instant::now() + self.cfg.t_timeout();
            let need = self.cfg.min_peers;
            self.wait_until(deadline, |n| n.registry.len() >= need);
        }
        self.started = true;
        Ok(())
    }

    fn request_peer_list(&mut self, to: &str, msg: &Message) -> Option<(u64, Vec<PeerEntry>)> {
        self.peer_lists_in.retain(|(f, _, _)| f != to);
        self.send(to, msg);
        let deadline = Instant::now() + self.cfg.t_apply();
        let target = to.to_string();
        if !self.wait_until(deadline, |n| n.peer_lists_in.iter().any(|(f, _, _)| *f == target)) {
            return None;
        }
        let pos = self.peer_lists_in.iter().position(|(f, _, _)| *f == to)?;
        let (_, it, peers) = self.peer_lists_in.remove(pos);
        Some((it, peers))
    }

    fn join_network(&mut self, bootstraps: &[String]) -> Result<(), NodeError> {
        let deadline = Instant::now() + self.cfg.t_timeout();
        let join = Message::Join {
            machine_time: self.me.time,
            address: self.me.address.clone(),
        };
        let (boot, peers) = 'found: loop {
            for b in bootstraps {
                if *b == self.me.address {
                    continue;
                }
                if let Some((_, peers)) = self.request_peer_list(b, &join) {
                    break 'found (b.clone(), peers);
                }
            }
            if Instant::now() >= deadline || self.stopped() {
                return Err(NodeError::Join("no bootstrap peer answered".into()));
            }
            self.pump(Duration::from_millis(50));
        };
        let sources: Vec<String> = peers
            .iter()
            .filter(|p| p.address != self.me.address)
            .map(|p| p.address.clone())
            .collect();
        if sources.is_empty() {
            return Err(NodeError::Join("bootstrap returned no peers".into()));
        }

        let mut lag = self.hooks.download_lag;
        loop {
            self.fetch_weights(&sources)?;
            if lag > 0 {
                let target = self.cur_iter + lag;
                lag = 0;
                self.wait_for_network(&sources, target)?;
            }
            match self.catch_up(&sources, None) {
                Ok(()) => break,
                Err(NodeError::Refetch { wanted, oldest }) => {
                    self.event(EventKind::HistoryWindowExceeded { wanted, oldest });
                }
                Err(e) => return Err(e),
            }
        }
        self.event(EventKind::DownloadFinished);
        self.verify_join(&sources, self.cur_iter);

        let announce = Message::AnnouncePeer {
            machine_time: self.me.time,
            address: self.me.address.clone(),
            start_iter: 0,
        };
        // Announcements forwarded to us while we wait for the ack must survive it.
        self.registry = PeerRegistry::new(self.me.clone(), 0);
        let (start, members) = self
            .request_peer_list(&boot, &announce)
            .ok_or_else(|| NodeError::Join("bootstrap did not acknowledge the announcement".into()))?;
        for p in members {
            if p.address != self.me.address && !self.registry.contains(&p.address) {
                self.admit(MachineKey::new(p.machine_time, p.address), start);
            }
        }
        self.event(EventKind::Admitted { start_iter: start });
        if self.cur_iter < start {
            let sources = self.registry.others();
            self.catch_up(&sources, Some(start))?;
        }
        if self.cur_iter > start {
            return Err(NodeError::Join(format!(
                "admitted at iteration {start} but already at {}",
                self.cur_iter
            )));
        }
        let sources = self.registry.others();
        if start > 0 {
            self.verify_join(&sources, start);
        }
        Ok(())
    }

    /// Compares the digest at `it` with one peer's.
    fn verify_join(&mut self, sources: &[String], it: u64) {
        let peer = sources[self.rng.next_u64() as usize % sources.len()].clone();
        self.checksums_in.remove(&(peer.clone(), it));
        self.send(&peer, &Message::ChecksumRequest { iteration: it });
        let deadline = Instant::now() + self.cfg.t_apply();
        let key = (peer, it);
        self.wait_until(deadline, |n| n.checksums_in.contains_key(&key));
        let matched = self.checksums_in.get(&key) == self.digests.get(&it);
        self.event(EventKind::JoinVerified { matched });
    }

    fn fetch_weights(&mut self, sources: &[String]) -> Result<(), NodeError> {
        let d = self.task.dim();
        let per = (self.cfg.weight_chunk_bytes / 4) as usize;
        let ranges: Vec<(usize, usize)> = (0..d).step_by(per).map(|lo| (lo, (lo + per).min(d))).collect();
        let mut got: Vec<Option<(u64, Vec<f32>)>> = vec![None; ranges.len()];
        for round in 0..FETCH_ROUNDS {
            let missing: Vec<usize> = (0..ranges.len()).filter(|i| got[*i].is_none()).collect();
            if missing.is_empty() {
                break;
            }
            self.weights_in.clear();
            for &ci in &missing {
                let (lo, hi) = ranges[ci];
                let peer = sources[(ci + round) % sources.len()].clone();
                self.send(
                    &peer,
                    &Message::WeightsRequest {
                        offset: lo as u64 * 4,
                        length: (hi - lo) as u64 * 4,
                    },
                );
            }
            let want: BTreeSet<u64> = missing.iter().map(|ci| ranges[*ci].0 as u64 * 4).collect();
            let deadline = Instant::now() + self.cfg.t_apply();
            self.wait_until(deadline, |n| {
                want.iter().all(|o| n.weights_in.iter().any(|w| w.offset == *o))
            });
            for w in std::mem::take(&mut self.weights_in) {
                let Some(ci) = ranges.iter().position(|(lo, _)| *lo as u64 * 4 == w.offset) else {
                    continue;
                };
                let (lo, hi) = ranges[ci];
                if got[ci].is_none() && w.values.len() == hi - lo && w.values.iter().all(|v| v.is_finite()) {
                    tracing::trace!(node = %self.me, from = %w.from, chunk = ci, "weights chunk");
                    got[ci] = Some((w.iteration, w.values));
                }
            }
        }
        let mut chunks: Vec<(u64, Vec<f32>)> = got
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| NodeError::Join("weight fetch incomplete".into()))?;
        let oldest = chunks.iter().map(|c| c.0).min().unwrap_or(0);
        let newest = chunks.iter().map(|c| c.0).max().unwrap_or(0);
        self.event(EventKind::WeightsFetched {
            chunks: chunks.len(),
            oldest,
            newest,
        });
        if oldest < newest {
            // Bring older chunks forward with the gradient history; each
            // element's update is independent so chunk-wise application is exact.
            let records = self.history_between(sources, oldest, newest)?;
            for r in &records {
                let ledger = ledger_from_record(r, self.quantizer.as_ref()).map_err(NodeError::Join)?;
                let eta = self.eta.eta(ledger.total(), r.iteration);
                for (ci, (it, values)) in chunks.iter_mut().enumerate() {
                    if *it == r.iteration {
                        if !ledger.is_empty() {
                            apply_ledger_at(values, ranges[ci].0, &ledger, eta)?;
                        }
                        *it += 1;
                    }
                }
            }
        }
        let theta: Vec<f32> = chunks.into_iter().flat_map(|(_, v)| v).collect();
        self.history.clear();
        self.set_state(newest, ParameterVector::new(theta));
        Ok(())
    }

    /// Asks `peer` for every retained record from `from_iter` on.
    fn request_history(&mut self, peer: &str, from_iter: u64) -> Option<Vec<LedgerRecord>> {
        self.history_in.retain(|(f, _)| f != peer);
        self.send(
            peer,
            &Message::HistoryRequest {
                from_iter,
                to_iter: u64::MAX,
            },
        );
        let deadline = Instant::now() + self.cfg.t_apply();
        let target = peer.to_string();
        self.wait_until(deadline, |n| n.history_in.iter().any(|(f, _)| *f == target));
        let pos = self.history_in.iter().position(|(f, _)| f == peer)?;
        let (_, mut records) = self.history_in.remove(pos);
        records.sort_by_key(|r| r.iteration);
        // Keep the contiguous prefix.
        let first = records.first().map(|r| r.iteration);
        let contiguous = records
            .iter()
            .enumerate()
            .take_while(|(i, r)| Some(r.iteration) == first.map(|f| f + *i as u64))
            .count();
        records.truncate(contiguous);
        Some(records)
    }

    fn history_between(&mut self, sources: &[String], from: u64, to: u64) -> Result<Vec<LedgerRecord>, NodeError> {
        let deadline = Instant::now() + self.cfg.t_timeout();
        let mut attempt = 0;
        loop {
            let peer = sources[attempt % sources.len()].clone();
            attempt += 1;
            if let Some(records) = self.request_history(&peer, from) {
                if let Some(first) = records.first() {
                    if first.iteration > from {
                        return Err(NodeError::Refetch {
                            wanted: from,
                            oldest: first.iteration,
                        });
                    }
                    if records.last().unwrap().iteration + 1 >= to {
                        return Ok(records.into_iter().filter(|r| r.iteration < to).collect());
                    }
                }
            }
            if Instant::now() >= deadline || self.stopped() {
                return Err(NodeError::Join(format!("history {from}..{to} unavailable")));
            }
            self.pump(POLL);
        }
    }

    /// Waits until some peer's history reaches `target` (the network has
    /// applied iteration `target - 1`).
    fn wait_for_network(&mut self, sources: &[String], target: u64) -> Result<(), NodeError> {
        let deadline = Instant::now() + self.cfg.t_timeout();
        let mut attempt = 0;
        loop {
            let peer = sources[attempt % sources.len()].clone();
            attempt += 1;
            let reached = self
                .request_history(&peer, self.cur_iter)
                .and_then(|r| r.last().map(|l| l.iteration + 1))
                .is_some_and(|top| top >= target);
            if reached {
                return Ok(());
            }
            if Instant::now() >= deadline || self.stopped() {
                return Err(NodeError::Join("network did not advance".into()));
            }
            self.pump(POLL);
        }
    }

    /// Replays history until `target`, or until no newer record exists.
    fn catch_up(&mut self, sources: &[String], target: Option<u64>) -> Result<(), NodeError> {
        let deadline = Instant::now() + self.cfg.t_timeout();
        let mut applied = 0;
        let mut attempt = 0;
        let result = loop {
            if target.is_some_and(|t| self.cur_iter >= t) {
                break Ok(());
            }
            let peer = sources[attempt % sources.len()].clone();
            attempt += 1;
            let records = self.request_history(&peer, self.cur_iter).unwrap_or_default();
            if let Some(first) = records.first() {
                if first.iteration > self.cur_iter {
                    break Err(NodeError::Refetch {
                        wanted: self.cur_iter,
                        oldest: first.iteration,
                    });
                }
            }
            let mut progressed = false;
            for r in records {
                if target.is_some_and(|t| self.cur_iter >= t) {
                    break;
                }
                if r.iteration == self.cur_iter {
                    self.apply_record(r)?;
                    applied += 1;
                    progressed = true;
                }
            }
            if !progressed {
                if target.is_none() {
                    break Ok(());
                }
                if Instant::now() >= deadline || self.stopped() {
                    break Err(NodeError::Join(format!(
                        "could not reach iteration {} (at {})",
                        target.unwrap(),
                        self.cur_iter
                    )));
                }
                self.pump(POLL);
            }
        };
        if applied > 0 {
            self.event(EventKind::HistoryApplied { records: applied });
        }
        result
    }

    // ---- training ----

    fn train(&mut self) -> Result<(), NodeError> {
        while self.cur_iter < self.cfg.max_iter {
            if self.stopped() || self.hooks.crash_at == Some(self.cur_iter) {
                return Err(NodeError::Crashed);
            }
            if let Some((at, d)) = self.hooks.stall_at {
                if at == self.cur_iter {
                    self.hooks.stall_at = None;
                    self.event(EventKind::Stalled { ms: d.as_millis() as u64 });
                    std::thread::sleep(d);
                }
            }
            if self.hooks.corrupt_at == Some(self.cur_iter) {
                self.hooks.corrupt_at = None;
                self.clean[0] = f32::from_bits(self.clean[0].to_bits() ^ 1);
                self.theta = self.clean.clone();
                self.event(EventKind::Corrupted);
            }
            self.iteration()?;
            if self.registry.is_alone() && !self.known_peers.is_empty() && self.cfg.rejoin {
                self.rejoin();
            }
        }
        Ok(())
    }

    fn rejoin(&mut self) {
        self.event(EventKind::Isolated);
        let former: Vec<String> = std::mem::take(&mut self.known_peers).into_iter().collect();
        let saved = (self.cur_iter, self.clean.clone());
        self.synced.clear();
        self.grads_in.clear();
        self.sets_in.clear();
        if let Err(e) = self.join_network(&former) {
            self.registry = PeerRegistry::new(self.me.clone(), 0);
            self.set_state(saved.0, saved.1);
            self.event(EventKind::RejoinFailed { reason: e.to_string() });
        }
    }

    fn shard(&self) -> u64 {
        if self.cfg.identical_data {
            0
        } else {
            self.me.time
        }
    }

    fn inference(&mut self, t: u64) -> Result<GradPayload, NodeError> {
        let shard = self.shard();
        let mut theta = std::mem::take(&mut self.theta);
        let mut notes = Vec::new();
        let result = compute_gradients(&self.task, &mut theta, &self.cfg, shard, self.me.time, t, |note| {
            notes.push(note);
        });
        self.theta = theta;
        for n in notes {
            self.event(n);
        }
        self.pump(Duration::ZERO);
        let values = result?;
        Ok(match &self.quantizer {
            Some(r) => GradPayload::OneByte(values.iter().map(|g| encode(*g, r).expect("finite")).collect()),
            None => GradPayload::F32(values.iter().map(|g| *g as f32).collect()),
        })
    }

    fn iteration(&mut self) -> Result<(), NodeError> {
        let t = self.cur_iter;
        let t_start = Instant::now();
        let restore = t.is_multiple_of(self.cfg.restore_every);
        let snapshot = restore.then(|| Snapshot::capture(&self.theta, t));

        // Inference.
        let own = self.inference(t)?;
        let own_count = own.len();
        self.own_grads.insert(t, own);
        self.serve_pending();

        // Barrier: performed inferences.
        let everyone = self.registry.others();
        self.broadcast(
            &everyone,
            &Message::Sync {
                phase: SyncPhase::PerformedInferences,
                machine_time: self.me.time,
                iteration: t,
            },
        );
        self.barrier(SyncPhase::PerformedInferences, t, t_start + self.cfg.t_timeout(), "performed_inferences");

        // Gather.
        let members = self.registry.active_others(t);
        self.broadcast(&members, &Message::GradsRequest { iteration: t });
        let gather_deadline = Instant::now() + self.cfg.t_apply();
        self.wait_until(gather_deadline, |n| {
            n.registry
                .active_others(t)
                .iter()
                .all(|p| n.grads_in.get(&t).is_some_and(|g| g.contains_key(p)))
        });
        let mut have: BTreeSet<MachineKey> = BTreeSet::new();
        if own_count > 0 {
            have.insert(self.me.clone());
        }
        for p in self.registry.active_others(t) {
            let key = self.registry.get(&p).unwrap().key.clone();
            match self.grads_in.get(&t).and_then(|g| g.get(&p)) {
                Some((time, g)) if *time == key.time && !g.is_empty() => {
                    have.insert(key);
                }
                Some(_) => {}
                None => self.event(EventKind::GradientsExcluded { peer: key }),
            }
        }

        // Agree on whose gradients to apply.
        let set_msg = Message::ReceivedSet {
            iteration: t,
            members: have
                .iter()
                .map(|k| PeerEntry {
                    machine_time: k.time,
                    address: k.address.clone(),
                })
                .collect(),
        };
        let everyone = self.registry.others();
        self.broadcast(&everyone, &set_msg);
        let my_addr = self.me.address.clone();
        self.sets_in.entry(t).or_default().insert(my_addr, have.clone());
        // A peer still waiting out a lost response sends its set up to one
        // T_apply late, so allow for that on top of our own gather window.
        let deadline = gather_deadline.max(Instant::now()) + self.cfg.t_apply();
        self.wait_until(deadline, |n| {
            n.registry
                .active_others(t)
                .iter()
                .all(|p| n.sets_in.get(&t).is_some_and(|s| s.contains_key(p)))
        });
        for p in self.registry.active_others(t) {
            if !self.sets_in.get(&t).is_some_and(|s| s.contains_key(&p)) {
                self.drop_peer(&p, "received_set");
            }
        }
        let mut agreed = have;
        for p in self.registry.active_others(t) {
            let theirs = &self.sets_in[&t][&p];
            agreed.retain(|k| theirs.contains(k));
        }

        // Apply.
        let mut ledger = GradientLedger::new(t);
        let mut entries = Vec::with_capacity(agreed.len());
        for key in &agreed {
            let payload = if *key == self.me {
                self.own_grads[&t].clone()
            } else {
                self.grads_in[&t][&key.address].1.clone()
            };
            let values = payload_values(&payload, self.quantizer.as_ref()).map_err(NodeError::Join)?;
            ledger.insert_values(key.clone(), values)?;
            entries.push(RecordEntry {
                machine_time: key.time,
                address: key.address.clone(),
                grads: payload,
            });
        }
        if let Some(s) = &snapshot {
            s.restore_into(&mut self.theta, t)?;
        }
        if !ledger.is_empty() {
            let eta = self.eta.eta(ledger.total(), t);
            apply_ledger(&mut self.theta, &ledger, eta)?;
        }
        self.push_history(LedgerRecord { iteration: t, entries });
        let theta = self.theta.clone();
        self.set_state(t + 1, theta);

        // Barrier: applied gradients.
        let everyone = self.registry.others();
        self.broadcast(
            &everyone,
            &Message::Sync {
                phase: SyncPhase::AppliedGradients,
                machine_time: self.me.time,
                iteration: t,
            },
        );
        self.barrier(SyncPhase::AppliedGradients, t, Instant::now() + self.cfg.t_apply(), "applied_gradients");

        self.verify_checksum(t + 1)?;
        self.record_metrics(t);
        self.prune(t);
        Ok(())
    }

    fn barrier(&mut self, phase: SyncPhase, t: u64, deadline: Instant, name: &'static str) {
        let me = self.me.address.clone();
        self.synced.entry((phase, t)).or_default().insert(me);
        self.wait_until(deadline, |n| {
            let got = n.synced.get(&(phase, t));
            n.registry
                .active_others(t)
                .iter()
                .all(|p| got.is_some_and(|s| s.contains(p)))
        });
        for p in self.registry.active_others(t) {
            if !self.synced.get(&(phase, t)).is_some_and(|s| s.contains(&p)) {
                self.drop_peer(&p, name);
            }
        }
    }

    fn verify_checksum(&mut self, it: u64) -> Result<(), NodeError> {
        let others = self.registry.active_others(it);
        if others.is_empty() {
            return Ok(());
        }
        let targets = if self.cfg.checksum_all_peers {
            others
        } else {
            vec![others[self.rng.next_u64() as usize % others.len()].clone()]
        };
        for p in &targets {
            self.send(p, &Message::ChecksumRequest { iteration: it });
        }
        let deadline = Instant::now() + self.cfg.t_apply();
        self.wait_until(deadline, |n| {
            targets
                .iter()
                .all(|p| n.checksums_in.contains_key(&(p.clone(), it)) || !n.registry.contains(p))
        });
        let mine = self.digests[&it];
        let mut mismatch = false;
        for p in targets {
            match self.checksums_in.get(&(p.clone(), it)) {
                Some(d) if *d == mine => self.event(EventKind::ChecksumMatch { peer: p }),
                Some(_) => {
                    mismatch = true;
                    self.event(EventKind::ChecksumMismatch { peer: p });
                }
                None => self.event(EventKind::ChecksumUnanswered { peer: p }),
            }
        }
        if mismatch {
            self.resolve_mismatch(it)?;
        }
        Ok(())
    }

    /// Polls every member's digest; if this node is outside the majority it
    /// re-fetches the weights from majority members.
    fn resolve_mismatch(&mut self, it: u64) -> Result<(), NodeError> {
        let others = self.registry.active_others(it);
        for p in &others {
            if !self.checksums_in.contains_key(&(p.clone(), it)) {
                self.send(p, &Message::ChecksumRequest { iteration: it });
            }
        }
        let deadline = Instant::now() + self.cfg.t_apply();
        self.wait_until(deadline, |n| others.iter().all(|p| n.checksums_in.contains_key(&(p.clone(), it))));
        let mine = self.digests[&it];
        let mut votes: BTreeMap<Digest32, Vec<MachineKey>> = BTreeMap::new();
        votes.entry(mine).or_default().push(self.me.clone());
        for p in &others {
            if let (Some(d), Some(m)) = (self.checksums_in.get(&(p.clone(), it)), self.registry.get(p)) {
                votes.entry(*d).or_default().push(m.key.clone());
            }
        }
        // Most votes wins; ties go to the group holding the smallest machine key.
        let (winner, holders) = votes
            .into_iter()
            .max_by(|(_, a), (_, b)| {
                a.len()
                    .cmp(&b.len())
                    .then_with(|| b.iter().min().cmp(&a.iter().min()))
            })
            .expect("own vote present");
        if winner == mine {
            self.event(EventKind::MajorityAgrees);
            return Ok(());
        }
        let sources: Vec<String> = holders.into_iter().map(|k| k.address).collect();
        let history = std::mem::take(&mut self.history);
        self.fetch_weights(&sources)?;
        self.history = history;
        let iteration = self.cur_iter;
        self.event(EventKind::Resynced { iteration });
        Ok(())
    }

    fn record_metrics(&mut self, t: u64) {
        self.completions.push((t, unix_ms()));
        let every = self.cfg.eval_every;
        let evaluate = every > 0 && ((t + 1).is_multiple_of(every) || t + 1 == self.cfg.max_iter);
        let loss = if evaluate {
            self.task.loss(&self.clean, &self.eval).ok()
        } else {
            None
        };
        let now = self.transport.meter().snapshot();
        let delta = now - self.last_meter;
        self.last_meter = now;
        self.metrics.push(IterationMetrics {
            iter: t,
            loss,
            bytes_sent: delta.payload_sent,
            bytes_received: delta.payload_received,
            live_peers: self.registry.len(),
            wall_ms: self.started_at.elapsed().as_millis() as u64,
        });
    }

    fn fold_trailing_traffic(&mut self) {
        let now = self.transport.meter().snapshot();
        let delta = now - self.last_meter;
        self.last_meter = now;
        if let Some(last) = self.metrics.last_mut() {
            last.bytes_sent += delta.payload_sent;
            last.bytes_received += delta.payload_received;
        }
    }

    fn prune(&mut self, t: u64) {
        let keep_from = t.saturating_sub(1);
        self.synced.retain(|(_, it), _| *it >= keep_from);
        self.grads_in.retain(|it, _| *it >= keep_from);
        self.sets_in.retain(|it, _| *it >= keep_from);
        self.checksums_in.retain(|(_, it), _| *it >= keep_from);
        self.own_grads.retain(|it, _| *it + 4 > t);
    }

    /// Announces completion and keeps answering requests until every member
    /// has finished too.
    fn linger(&mut self) {
        let it = self.cur_iter;
        let everyone = self.registry.others();
        self.broadcast(
            &everyone,
            &Message::Sync {
                phase: SyncPhase::Finished,
                machine_time: self.me.time,
                iteration: it,
            },
        );
        let me = self.me.address.clone();
        self.synced.entry((SyncPhase::Finished, it)).or_default().insert(me);
        let deadline = Instant::now() + self.cfg.t_apply();
        self.wait_until(deadline, |n| {
            let got = n.synced.get(&(SyncPhase::Finished, it));
            n.registry.others().iter().all(|p| got.is_some_and(|s| s.contains(p)))
        });
    }
}
