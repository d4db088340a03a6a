//! TCP transport: one outbound stream per peer for writing, one reader thread
//! per accepted inbound stream.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use onebyte_core::wire::{decode_message, encode_message, FrameDecoder, Message};

use super::{Incoming, Session, Transport, TransportError};
use crate::meter::Meter;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const WRITE_TIMEOUT: Duration = Duration::from_secs(10);
const ACCEPT_POLL: Duration = Duration::from_millis(5);

pub struct TcpTransport {
    session: Session,
    meter: Arc<Meter>,
    rx: Receiver<Incoming>,
    outbound: HashMap<String, TcpStream>,
    shutdown: Arc<AtomicBool>,
    inbound: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpTransport {
    /// Listens on `listen`; the session address becomes the bound address
    /// (so port 0 picks a free port).
    pub fn bind(listen: &str, mut session: Session) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        session.address = listener.local_addr()?.to_string();
        let meter = Arc::new(Meter::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let inbound = Arc::new(Mutex::new(Vec::new()));
        let (tx, rx) = channel();
        let acceptor = {
            let (meter, shutdown, inbound, session) = (meter.clone(), shutdown.clone(), inbound.clone(), session.clone());
            std::thread::Builder::new()
                .name(format!("accept {}", session.address))
                .spawn(move || accept_loop(listener, session, tx, meter, shutdown, inbound))?
        };
        Ok(Self {
            session,
            meter,
            rx,
            outbound: HashMap::new(),
            shutdown,
            inbound,
            acceptor: Some(acceptor),
        })
    }

    fn connect(&mut self, to: &str) -> Result<&mut TcpStream, TransportError> {
        if !self.outbound.contains_key(to) {
            let addr: SocketAddr = to
                .to_socket_addrs()
                .ok()
                .and_then(|mut a| a.next())
                .ok_or_else(|| TransportError::Unreachable(to.to_string()))?;
            let mut stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)
                .map_err(|_| TransportError::Unreachable(to.to_string()))?;
            stream.set_nodelay(true)?;
            stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
            let hello = encode_message(&self.session.hello())?;
            stream.write_all(&hello)?;
            self.meter.record_sent(&hello);
            self.outbound.insert(to.to_string(), stream);
        }
        Ok(self.outbound.get_mut(to).unwrap())
    }

    fn write_frame(&mut self, to: &str, frame: &[u8]) -> Result<(), TransportError> {
        let stream = self.connect(to)?;
        stream.write_all(frame)?;
        Ok(())
    }
}

impl Transport for TcpTransport {
    fn address(&self) -> &str {
        &self.session.address
    }

    fn send(&mut self, to: &str, msg: &Message) -> Result<(), TransportError> {
        let frame = encode_message(msg)?;
        if let Err(first) = self.write_frame(to, &frame) {
            // Reconnect once on a broken stream.
            self.outbound.remove(to);
            if matches!(first, TransportError::Unreachable(_)) {
                return Err(first);
            }
            self.write_frame(to, &frame).inspect_err(|_| {
                self.outbound.remove(to);
            })?;
        }
        self.meter.record_sent(&frame);
        Ok(())
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Option<Incoming> {
        self.rx.recv_timeout(timeout).ok()
    }

    fn meter(&self) -> Arc<Meter> {
        self.meter.clone()
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for s in self.outbound.values() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        for s in self.inbound.lock().unwrap().iter() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    session: Session,
    tx: Sender<Incoming>,
    meter: Arc<Meter>,
    shutdown: Arc<AtomicBool>,
    inbound: Arc<Mutex<Vec<TcpStream>>>,
) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                if let Ok(clone) = stream.try_clone() {
                    inbound.lock().unwrap().push(clone);
                }
                let (session, tx, meter) = (session.clone(), tx.clone(), meter.clone());
                let _ = std::thread::Builder::new()
                    .name(format!("read {}", session.address))
                    .spawn(move || read_loop(stream, session, tx, meter));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                std::thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn read_loop(mut stream: TcpStream, session: Session, tx: Sender<Incoming>, meter: Arc<Meter>) {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut peer: Option<String> = None;
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) | Err(_) => return,
            Ok(n) => n,
        };
        decoder.extend(&buf[..n]);
        loop {
            let frame = match decoder.next_frame() {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    tracing::warn!(error = %e, "protocol fault, closing connection");
                    let _ = stream.shutdown(std::net::Shutdown::Both);
                    return;
                }
            };
            meter.record_received(&frame);
            let msg = match decode_message(&frame) {
                Ok(m) => m,
                Err(e) => {
                    tracing::warn!(error = %e, "dropping undecodable frame");
                    continue;
                }
            };
            match (&peer, msg) {
                (None, hello @ Message::Hello { .. }) => {
                    if !session.accepts(&hello) {
                        tracing::warn!("peer has a different model or codec configuration");
                        let _ = stream.shutdown(std::net::Shutdown::Both);
                        return;
                    }
                    if let Message::Hello { address, .. } = hello {
                        peer = Some(address);
                    }
                }
                (None, _) => {
                    tracing::warn!("connection did not open with HELLO");
                    let _ = stream.shutdown(std::net::Shutdown::Both);
                    return;
                }
                (Some(_), Message::Hello { .. }) => {}
                (Some(from), msg) => {
                    if tx.send(Incoming { from: from.clone(), msg }).is_err() {
                        return;
                    }
                }
            }
        }
    }
}
