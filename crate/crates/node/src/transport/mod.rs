//! Message delivery between peers.
//!
//! Every connection starts with a `HELLO` frame naming the sender and its
//! codec settings; both transports hide it from the node and drop traffic from
//! peers whose settings differ.

mod loopback;
mod tcp;

use std::sync::Arc;
use std::time::Duration;

use onebyte_core::wire::{Message, WireError};
use thiserror::Error;

pub use loopback::{DropRule, LoopbackNet, LoopbackTransport, RuleId};
pub use tcp::TcpTransport;

use crate::meter::Meter;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {0} is unreachable")]
    Unreachable(String),
    #[error("address {0} is already in use")]
    AddressInUse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Incoming {
    pub from: String,
    pub msg: Message,
}

/// What a node states about itself when opening a connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub machine_time: u64,
    pub address: String,
    pub dimension: u64,
    pub quantized: bool,
    pub g_min: f64,
    pub g_max: f64,
}

impl Session {
    pub fn hello(&self) -> Message {
        Message::Hello {
            machine_time: self.machine_time,
            address: self.address.clone(),
            dimension: self.dimension,
            quantized: self.quantized,
            g_min: self.g_min,
            g_max: self.g_max,
        }
    }

    /// Whether a peer's `HELLO` describes the same model and gradient encoding.
    pub fn accepts(&self, hello: &Message) -> bool {
        match hello {
            Message::Hello {
                dimension,
                quantized,
                g_min,
                g_max,
                ..
            } => {
                *dimension == self.dimension
                    && *quantized == self.quantized
                    && g_min.to_bits() == self.g_min.to_bits()
                    && g_max.to_bits() == self.g_max.to_bits()
            }
            _ => false,
        }
    }
}

pub trait Transport: Send {
    fn address(&self) -> &str;

    /// Queues `msg` for `to`. Delivery is reliable and ordered per sender while
    /// the receiver is alive; a lost peer shows up as silence, not an error.
    fn send(&mut self, to: &str, msg: &Message) -> Result<(), TransportError>;

    fn recv_timeout(&mut self, timeout: Duration) -> Option<Incoming>;

    fn meter(&self) -> Arc<Meter>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn address(&self) -> &str {
        (**self).address()
    }

    fn send(&mut self, to: &str, msg: &Message) -> Result<(), TransportError> {
        (**self).send(to, msg)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Option<Incoming> {
        (**self).recv_timeout(timeout)
    }

    fn meter(&self) -> Arc<Meter> {
        (**self).meter()
    }
}
