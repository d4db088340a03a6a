//! In-process transport: encoded frames travel over channels, so byte counts
//! match the TCP transport exactly.

use std::collections::{HashMap, HashSet};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use onebyte_core::wire::{decode_message, encode_message, Message};

use super::{Incoming, Session, Transport, TransportError};
use crate::meter::Meter;

/// Returns true to drop a message travelling `from → to`.
pub type DropRule = Box<dyn Fn(&str, &str, &Message) -> bool + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuleId(u64);

#[derive(Default)]
struct NetInner {
    endpoints: HashMap<String, Sender<(String, Vec<u8>)>>,
    rules: Vec<(RuleId, DropRule)>,
    next_rule: u64,
}

/// A set of in-process endpoints plus message-drop rules for fault injection.
#[derive(Clone, Default)]
pub struct LoopbackNet {
    inner: Arc<Mutex<NetInner>>,
}

impl LoopbackNet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn endpoint(&self, session: Session) -> Result<LoopbackTransport, TransportError> {
        let (tx, rx) = channel();
        let mut inner = self.inner.lock().unwrap();
        if inner.endpoints.contains_key(&session.address) {
            return Err(TransportError::AddressInUse(session.address));
        }
        inner.endpoints.insert(session.address.clone(), tx);
        Ok(LoopbackTransport {
            net: self.clone(),
            session,
            rx,
            meter: Arc::new(Meter::default()),
            greeted: HashSet::new(),
            rejected: HashSet::new(),
        })
    }

    pub fn add_drop_rule(&self, rule: DropRule) -> RuleId {
        let mut inner = self.inner.lock().unwrap();
        let id = RuleId(inner.next_rule);
        inner.next_rule += 1;
        inner.rules.push((id, rule));
        id
    }

    pub fn remove_drop_rule(&self, id: RuleId) {
        self.inner.lock().unwrap().rules.retain(|(r, _)| *r != id);
    }

    pub fn is_registered(&self, address: &str) -> bool {
        self.inner.lock().unwrap().endpoints.contains_key(address)
    }

    fn deliver(&self, from: &str, to: &str, msg: &Message, frame: Vec<u8>) -> Result<(), TransportError> {
        let inner = self.inner.lock().unwrap();
        let Some(tx) = inner.endpoints.get(to) else {
            return Err(TransportError::Unreachable(to.to_string()));
        };
        if inner.rules.iter().any(|(_, rule)| rule(from, to, msg)) {
            return Ok(());
        }
        tx.send((from.to_string(), frame))
            .map_err(|_| TransportError::Unreachable(to.to_string()))
    }

    fn unregister(&self, address: &str) {
        self.inner.lock().unwrap().endpoints.remove(address);
    }
}

pub struct LoopbackTransport {
    net: LoopbackNet,
    session: Session,
    rx: Receiver<(String, Vec<u8>)>,
    meter: Arc<Meter>,
    greeted: HashSet<String>,
    rejected: HashSet<String>,
}

impl LoopbackTransport {
    fn send_frame(&mut self, to: &str, msg: &Message) -> Result<(), TransportError> {
        let frame = encode_message(msg)?;
        self.meter.record_sent(&frame);
        self.net.deliver(&self.session.address, to, msg, frame)
    }
}

impl Transport for LoopbackTransport {
    fn address(&self) -> &str {
        &self.session.address
    }

    fn send(&mut self, to: &str, msg: &Message) -> Result<(), TransportError> {
        if !self.greeted.contains(to) {
            let hello = self.session.hello();
            self.send_frame(to, &hello)?;
            self.greeted.insert(to.to_string());
        }
        let result = self.send_frame(to, msg);
        if result.is_err() {
            self.greeted.remove(to);
        }
        result
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Option<Incoming> {
        let deadline = Instant::now() + timeout;
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            let (from, frame) = match self.rx.recv_timeout(wait) {
                Ok(x) => x,
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => return None,
            };
            self.meter.record_received(&frame);
            let msg = match decode_message(&frame) {
                Ok(m) => m,
                Err(e) => {
                    tracing::warn!(%from, error = %e, "dropping undecodable frame");
                    continue;
                }
            };
            if let Message::Hello { .. } = msg {
                if self.session.accepts(&msg) {
                    self.rejected.remove(&from);
                } else {
                    tracing::warn!(%from, "peer has a different model or codec configuration");
                    self.rejected.insert(from);
                }
                continue;
            }
            if self.rejected.contains(&from) {
                continue;
            }
            return Some(Incoming { from, msg });
        }
    }

    fn meter(&self) -> Arc<Meter> {
        self.meter.clone()
    }
}

impl Drop for LoopbackTransport {
    fn drop(&mut self) {
        self.net.unregister(&self.session.address);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(addr: &str, quantized: bool) -> Session {
        Session {
            machine_time: 1,
            address: addr.into(),
            dimension: 10,
            quantized,
            g_min: 1e-8,
            g_max: 1e3,
        }
    }

    #[test]
    fn hello_precedes_first_message_and_is_hidden() {
        let net = LoopbackNet::new();
        let mut a = net.endpoint(session("a", true)).unwrap();
        let mut b = net.endpoint(session("b", true)).unwrap();
        a.send("b", &Message::GradsRequest { iteration: 3 }).unwrap();
        a.send("b", &Message::GradsRequest { iteration: 4 }).unwrap();
        let first = b.recv_timeout(Duration::from_millis(100)).unwrap();
        assert_eq!(first.from, "a");
        assert_eq!(first.msg, Message::GradsRequest { iteration: 3 });
        assert_eq!(b.recv_timeout(Duration::from_millis(100)).unwrap().msg, Message::GradsRequest { iteration: 4 });
        assert_eq!(a.meter().snapshot().frames_sent, 3);
        assert_eq!(b.meter().snapshot().frames_received, 3);
        assert_eq!(a.meter().snapshot().frame_bytes_sent, b.meter().snapshot().frame_bytes_received);
    }

    #[test]
    fn mismatched_codec_is_ignored() {
        let net = LoopbackNet::new();
        let mut a = net.endpoint(session("a", false)).unwrap();
        let mut b = net.endpoint(session("b", true)).unwrap();
        a.send("b", &Message::GradsRequest { iteration: 3 }).unwrap();
        assert!(b.recv_timeout(Duration::from_millis(20)).is_none());
    }

    #[test]
    fn drop_rules_and_unregistering() {
        let net = LoopbackNet::new();
        let mut a = net.endpoint(session("a", true)).unwrap();
        let mut b = net.endpoint(session("b", true)).unwrap();
        let rule = net.add_drop_rule(Box::new(|_, to, m| to == "b" && matches!(m, Message::GradsRequest { .. })));
        a.send("b", &Message::GradsRequest { iteration: 1 }).unwrap();
        a.send("b", &Message::ChecksumRequest { iteration: 1 }).unwrap();
        assert_eq!(b.recv_timeout(Duration::from_millis(50)).unwrap().msg, Message::ChecksumRequest { iteration: 1 });
        net.remove_drop_rule(rule);
        drop(b);
        assert!(!net.is_registered("b"));
        assert!(matches!(
            a.send("b", &Message::GradsRequest { iteration: 2 }),
            Err(TransportError::Unreachable(_))
        ));
        assert!(net.endpoint(session("a", true)).is_err());
    }
}
