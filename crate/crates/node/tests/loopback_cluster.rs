use std::thread;
use std::time::Duration;

use onebyte_core::wire::Message;
use onebyte_node::{session_for, EventKind, LoopbackNet, Node, NodeHooks, NodeReport, Outcome, RunConfig, TaskConfig, TaskName};

fn config(max_iter: u64, peers: usize) -> RunConfig {
    RunConfig {
        task: TaskConfig {
            kind: TaskName::Quadratic,
            dim: 20,
            ..TaskConfig::default()
        },
        base_eta: 0.02,
        max_iter,
        min_peers: peers,
        t_timeout_ms: 5_000,
        t_apply_grads_ms: 2_000,
        ..RunConfig::default()
    }
}

fn run_cluster(net: &LoopbackNet, cfg: &RunConfig, n: usize) -> Vec<NodeReport> {
    let mut handles = Vec::new();
    for i in 0..n {
        let addr = format!("node-{i}");
        let time = 100 + i as u64;
        let transport = net.endpoint(session_for(cfg, time, &addr).unwrap()).unwrap();
        let boot = if i == 0 { vec![] } else { vec!["node-0".to_string()] };
        let node = Node::new(cfg.clone(), time, Box::new(transport), boot, NodeHooks::default()).unwrap();
        handles.push(thread::spawn(move || node.run()));
        thread::sleep(Duration::from_millis(5));
    }
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

fn assert_agree(reports: &[NodeReport], iter: u64) {
    for r in reports {
        assert_eq!(r.outcome, Outcome::Finished, "{}: {:?}", r.key, r.events);
        assert_eq!(r.cur_iter, iter);
        assert_eq!(r.digest, reports[0].digest, "{} diverged", r.key);
    }
}

#[test]
fn single_node_trains_alone() {
    let net = LoopbackNet::new();
    let cfg = config(30, 1);
    let reports = run_cluster(&net, &cfg, 1);
    assert_agree(&reports, 30);
    let m = &reports[0].metrics;
    assert_eq!(m.len(), 30);
    assert!(m[29].loss.unwrap() < m[0].loss.unwrap());
}

#[test]
fn three_nodes_stay_identical() {
    let net = LoopbackNet::new();
    let cfg = config(25, 3);
    let reports = run_cluster(&net, &cfg, 3);
    assert_agree(&reports, 25);
    for r in &reports {
        assert_eq!(r.live_peers.len(), 3);
        assert!(r.events.iter().all(|e| !matches!(e.kind, EventKind::ChecksumMismatch { .. })));
        // Each iteration sends 4 one-byte gradients to each of two peers.
        assert_eq!(r.meter.grad_bytes_sent, 25 * 2 * 4);
    }
}

#[test]
fn lost_gradient_response_is_excluded_everywhere() {
    let net = LoopbackNet::new();
    net.add_drop_rule(Box::new(|from, to, m| {
        from == "node-1" && to == "node-2" && matches!(m, Message::GradsResponse { iteration: 3, .. })
    }));
    let cfg = config(8, 3);
    let reports = run_cluster(&net, &cfg, 3);
    assert_agree(&reports, 8);
    let excluded = reports[2]
        .events
        .iter()
        .any(|e| matches!(&e.kind, EventKind::GradientsExcluded { peer } if peer.address == "node-1"));
    assert!(excluded);
    // Everyone kept node-1 as a member.
    assert!(reports.iter().all(|r| r.live_peers.len() == 3));
}

#[test]
fn float_mode_sends_four_bytes_per_gradient() {
    let net = LoopbackNet::new();
    let cfg = RunConfig {
        quantized: false,
        ..config(5, 2)
    };
    let reports = run_cluster(&net, &cfg, 2);
    assert_agree(&reports, 5);
    assert_eq!(reports[0].meter.grad_bytes_sent, 5 * 4 * 4);
}
