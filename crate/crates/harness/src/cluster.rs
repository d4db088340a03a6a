//! Runs several nodes on one machine, over the loopback transport (one
//! thread per node) or real TCP sockets on localhost, with scheduled faults.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use onebyte_core::params::Digest32;
use onebyte_core::spsa::MachineKey;
use onebyte_node::{session_for, EventKind, LoopbackNet, Node, NodeHooks, NodeReport, Outcome, RunConfig, TcpTransport, Transport};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid cluster: {0}")]
    Invalid(String),
    #[error("node {index}: {reason}")]
    Start { index: usize, reason: String },
    #[error("bad fault `{0}`: expected crash:<node>@<iter>, stall:<node>@<iter>:<ms>, corrupt:<node>@<iter> or join:<node>@<iter>")]
    FaultSyntax(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Crash,
    Stall(Duration),
    Corrupt,
    /// The node is not started with the others; it joins once the network
    /// reaches the iteration.
    Join,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub node: usize,
    pub iteration: u64,
    pub action: FaultAction,
}

impl FromStr for Fault {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ClusterError::FaultSyntax(s.to_string());
        let (action, rest) = s.split_once(':').ok_or_else(bad)?;
        let (node, rest) = rest.split_once('@').ok_or_else(bad)?;
        let node: usize = node.parse().map_err(|_| bad())?;
        let (iter, extra) = match rest.split_once(':') {
            Some((i, e)) => (i, Some(e)),
            None => (rest, None),
        };
        let iteration: u64 = iter.parse().map_err(|_| bad())?;
        let action = match (action, extra) {
            ("crash", None) => FaultAction::Crash,
            ("corrupt", None) => FaultAction::Corrupt,
            ("join", None) => FaultAction::Join,
            ("stall", Some(ms)) => FaultAction::Stall(Duration::from_millis(ms.parse().map_err(|_| bad())?)),
            _ => return Err(bad()),
        };
        Ok(Fault { node, iteration, action })
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            FaultAction::Crash => write!(f, "crash:{}@{}", self.node, self.iteration),
            FaultAction::Corrupt => write!(f, "corrupt:{}@{}", self.node, self.iteration),
            FaultAction::Join => write!(f, "join:{}@{}", self.node, self.iteration),
            FaultAction::Stall(d) => write!(f, "stall:{}@{}:{}", self.node, self.iteration, d.as_millis()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub config: RunConfig,
    /// Machine time of every node, joiners included. Node `i` is `node-i`
    /// on the loopback transport.
    pub machine_times: Vec<u64>,
    pub transport: TransportKind,
    pub faults: Vec<Fault>,
    /// Joiners wait for the network to advance this many iterations after
    /// downloading the weights, to exercise history replay.
    pub download_lag: u64,
    /// Give up on the run after this long.
    pub deadline: Duration,
}

impl ClusterSpec {
    pub fn new(config: RunConfig, nodes: usize) -> Self {
        Self {
            config,
            machine_times: (0..nodes as u64).map(|i| 1_000 + i).collect(),
            transport: TransportKind::Loopback,
            faults: Vec::new(),
            download_lag: 0,
            deadline: Duration::from_secs(600),
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.faults.push(fault);
        self
    }

    pub fn nodes(&self) -> usize {
        self.machine_times.len()
    }

    fn join_iter(&self, node: usize) -> Option<u64> {
        self.faults
            .iter()
            .find(|f| f.node == node && f.action == FaultAction::Join)
            .map(|f| f.iteration)
    }

    fn hooks(&self, node: usize) -> NodeHooks {
        let mut h = NodeHooks::default();
        for f in self.faults.iter().filter(|f| f.node == node) {
            match f.action {
                FaultAction::Crash => h.crash_at = Some(f.iteration),
                FaultAction::Stall(d) => h.stall_at = Some((f.iteration, d)),
                FaultAction::Corrupt => h.corrupt_at = Some(f.iteration),
                FaultAction::Join => h.download_lag = self.download_lag,
            }
        }
        h
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.machine_times.is_empty() {
            return Err(ClusterError::Invalid("no nodes".into()));
        }
        if let Some(f) = self.faults.iter().find(|f| f.node >= self.nodes()) {
            return Err(ClusterError::Invalid(format!("fault {f} names a node that does not exist")));
        }
        if self.join_iter(0).is_some() {
            return Err(ClusterError::Invalid("node 0 founds the network and cannot join later".into()));
        }
        self.config.validate().map_err(|e| ClusterError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct NodeRun {
    pub index: usize,
    pub address: String,
    /// Network iteration at which the harness started this node, for joiners.
    pub launched_at: Option<u64>,
    pub report: NodeReport,
}

impl NodeRun {
    pub fn finished(&self) -> bool {
        self.report.outcome == Outcome::Finished
    }

    pub fn event_ms(&self, pred: impl Fn(&EventKind) -> bool) -> Option<(u64, u64)> {
        self.report
            .events
            .iter()
            .find(|e| pred(&e.kind))
            .map(|e| (e.unix_ms, e.iteration))
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub nodes: Vec<NodeRun>,
    pub wall: Duration,
    /// Set when a node ended with an unexpected fault or the deadline hit.
    pub failed: Option<String>,
}

impl RunReport {
    pub fn finished(&self) -> impl Iterator<Item = &NodeRun> {
        self.nodes.iter().filter(|n| n.finished())
    }

    /// True when every finished node holds the same iteration and bit-identical θ.
    pub fn replicas_agree(&self) -> bool {
        let mut it = self.finished();
        let Some(first) = it.next() else {
            return false;
        };
        it.all(|n| n.report.cur_iter == first.report.cur_iter && n.report.theta.bit_eq(&first.report.theta))
    }

    pub fn digests(&self) -> Vec<Digest32> {
        self.finished().map(|n| n.report.digest).collect()
    }

    pub fn node(&self, index: usize) -> &NodeRun {
        self.nodes.iter().find(|n| n.index == index).expect("node index")
    }

    pub fn keys(&self) -> Vec<MachineKey> {
        self.nodes.iter().map(|n| n.report.key.clone()).collect()
    }
}

struct Running {
    index: usize,
    address: String,
    launched_at: Option<u64>,
    progress: Arc<AtomicU64>,
    handle: JoinHandle<NodeReport>,
}

/// Runs `spec` on a fresh loopback network (or TCP).
pub fn run_cluster(spec: &ClusterSpec) -> Result<RunReport, ClusterError> {
    run_cluster_on(spec, &LoopbackNet::new())
}

/// Runs `spec` on `net`, so callers can install drop rules first. Loopback
/// addresses are `node-<index>`.
pub fn run_cluster_on(spec: &ClusterSpec, net: &LoopbackNet) -> Result<RunReport, ClusterError> {
    spec.validate()?;
    let started = Instant::now();
    let stop = Arc::new(AtomicBool::new(false));
    let initial: Vec<usize> = (0..spec.nodes()).filter(|i| spec.join_iter(*i).is_none()).collect();
    let mut cfg = spec.config.clone();
    cfg.min_peers = initial.len();

    let mut running: Vec<Running> = Vec::new();
    let mut addresses: Vec<String> = Vec::new();
    let launch = |index: usize, boot: Vec<String>, at: Option<u64>| -> Result<Running, ClusterError> {
        let time = spec.machine_times[index];
        let fail = |reason: String| ClusterError::Start { index, reason };
        let transport: Box<dyn Transport> = match spec.transport {
            TransportKind::Loopback => {
                let session = session_for(&cfg, time, &format!("node-{index}")).map_err(|e| fail(e.to_string()))?;
                Box::new(net.endpoint(session).map_err(|e| fail(e.to_string()))?)
            }
            TransportKind::Tcp => {
                let session = session_for(&cfg, time, "127.0.0.1:0").map_err(|e| fail(e.to_string()))?;
                Box::new(TcpTransport::bind("127.0.0.1:0", session).map_err(|e| fail(e.to_string()))?)
            }
        };
        let address = transport.address().to_string();
        let progress = Arc::new(AtomicU64::new(0));
        let mut hooks = spec.hooks(index);
        hooks.progress = Some(progress.clone());
        hooks.stop = Some(stop.clone());
        let node = Node::new(cfg.clone(), time, transport, boot, hooks).map_err(|e| fail(e.to_string()))?;
        let handle = std::thread::Builder::new()
            .name(format!("node-{index}"))
            .spawn(move || node.run())
            .map_err(|e| fail(e.to_string()))?;
        Ok(Running {
            index,
            address,
            launched_at: at,
            progress,
            handle,
        })
    };

    for &i in &initial {
        let r = launch(i, addresses.clone(), None)?;
        addresses.push(r.address.clone());
        running.push(r);
    }
    let mut pending: Vec<(usize, u64)> = (0..spec.nodes()).filter_map(|i| spec.join_iter(i).map(|t| (i, t))).collect();
    pending.sort_by_key(|p| p.1);

    let mut timed_out = false;
    loop {
        let network_iter = running
            .iter()
            .filter(|r| !r.handle.is_finished())
            .map(|r| r.progress.load(Ordering::SeqCst))
            .max();
        if let Some(net_iter) = network_iter {
            while let Some(&(i, at)) = pending.first() {
                if net_iter < at {
                    break;
                }
                pending.remove(0);
                let r = launch(i, addresses.clone(), Some(net_iter))?;
                addresses.push(r.address.clone());
                running.push(r);
            }
        }
        if running.iter().all(|r| r.handle.is_finished()) {
            break;
        }
        if started.elapsed() > spec.deadline {
            timed_out = true;
            stop.store(true, Ordering::SeqCst);
        }
        std::thread::sleep(Duration::from_millis(1));
    }

    let mut nodes: Vec<NodeRun> = running
        .into_iter()
        .map(|r| NodeRun {
            index: r.index,
            address: r.address,
            launched_at: r.launched_at,
            report: r.handle.join().expect("node thread panicked"),
        })
        .collect();
    nodes.sort_by_key(|n| n.index);

    let expected_crash = |i: usize| spec.faults.iter().any(|f| f.node == i && f.action == FaultAction::Crash);
    let mut failed = timed_out.then(|| "deadline exceeded".to_string());
    if !pending.is_empty() {
        failed.get_or_insert_with(|| format!("{} joiners never launched", pending.len()));
    }
    for n in &nodes {
        match &n.report.outcome {
            Outcome::Finished => {}
            Outcome::Crashed if expected_crash(n.index) => {}
            other => {
                failed.get_or_insert_with(|| format!("node {} ended as {other:?}", n.index));
            }
        }
    }
    Ok(RunReport {
        nodes,
        wall: started.elapsed(),
        failed,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn fault_syntax_round_trips() {
        for s in ["crash:2@5", "stall:1@3:1500", "corrupt:0@9", "join:3@7"] {
            let f: Fault = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        for s in ["crash:2", "stall:1@3", "boom:1@2", "crash:x@1", "join:1@2:5"] {
            assert!(s.parse::<Fault>().is_err(), "{s}");
        }
    }

    #[test]
    fn founder_cannot_join() {
        let spec = ClusterSpec::new(RunConfig::default(), 2).with_fault("join:0@3".parse().unwrap());
        assert!(matches!(spec.validate(), Err(ClusterError::Invalid(_))));
        let spec = ClusterSpec::new(RunConfig::default(), 2).with_fault("crash:5@3".parse().unwrap());
        assert!(spec.validate().is_err());
    }

    fn any_fault() -> impl Strategy<Value = Fault> {
        let action = prop_oneof![
            Just(FaultAction::Crash),
            Just(FaultAction::Corrupt),
            Just(FaultAction::Join),
            (0u64..100_000).prop_map(|ms| FaultAction::Stall(Duration::from_millis(ms))),
        ];
        (0usize..64, any::<u64>(), action).prop_map(|(node, iteration, action)| Fault { node, iteration, action })
    }

    proptest! {
        #[test]
        fn any_fault_survives_display_and_parse(f in any_fault()) {
            prop_assert_eq!(f.to_string().parse::<Fault>().unwrap(), f);
        }
    }
}
