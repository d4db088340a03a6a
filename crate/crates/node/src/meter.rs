//! Byte counters at the transport boundary.

use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

use onebyte_core::wire::{gradient_bytes_in_frame, FrameHeader, MsgType};

const TYPES: usize = 16;

#[derive(Debug, Default)]
pub struct Meter {
    frames_sent: AtomicU64,
    frame_bytes_sent: AtomicU64,
    payload_sent: AtomicU64,
    frames_received: AtomicU64,
    frame_bytes_received: AtomicU64,
    payload_received: AtomicU64,
    grad_frames_sent: AtomicU64,
    grad_bytes_sent: AtomicU64,
    grad_bytes_received: AtomicU64,
    payload_sent_by_type: [AtomicU64; TYPES],
}

/// Plain copy of the counters at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MeterSnapshot {
    pub frames_sent: u64,
    pub frame_bytes_sent: u64,
    pub payload_sent: u64,
    pub frames_received: u64,
    pub frame_bytes_received: u64,
    pub payload_received: u64,
    /// `GRADS_RESPONSE` frames sent.
    pub grad_frames_sent: u64,
    /// Gradient bytes inside sent `GRADS_RESPONSE` payloads (excluding their
    /// iteration, machine time, mode and count fields).
    pub grad_bytes_sent: u64,
    pub grad_bytes_received: u64,
    pub payload_sent_by_type: [u64; TYPES],
}

impl Meter {
    pub fn record_sent(&self, frame: &[u8]) {
        self.frames_sent.fetch_add(1, Relaxed);
        self.frame_bytes_sent.fetch_add(frame.len() as u64, Relaxed);
        if let Ok(Some(h)) = FrameHeader::parse(frame) {
            self.payload_sent.fetch_add(h.payload_len as u64, Relaxed);
            if let Some(slot) = self.payload_sent_by_type.get(h.msg_type as usize) {
                slot.fetch_add(h.payload_len as u64, Relaxed);
            }
            if h.msg_type == MsgType::GradsResponse as u8 {
                self.grad_frames_sent.fetch_add(1, Relaxed);
                self.grad_bytes_sent
                    .fetch_add(gradient_bytes_in_frame(frame) as u64, Relaxed);
            }
        }
    }

    pub fn record_received(&self, frame: &[u8]) {
        self.frames_received.fetch_add(1, Relaxed);
        self.frame_bytes_received.fetch_add(frame.len() as u64, Relaxed);
        if let Ok(Some(h)) = FrameHeader::parse(frame) {
            self.payload_received.fetch_add(h.payload_len as u64, Relaxed);
            self.grad_bytes_received
                .fetch_add(gradient_bytes_in_frame(frame) as u64, Relaxed);
        }
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        MeterSnapshot {
            frames_sent: self.frames_sent.load(Relaxed),
            frame_bytes_sent: self.frame_bytes_sent.load(Relaxed),
            payload_sent: self.payload_sent.load(Relaxed),
            frames_received: self.frames_received.load(Relaxed),
            frame_bytes_received: self.frame_bytes_received.load(Relaxed),
            payload_received: self.payload_received.load(Relaxed),
            grad_frames_sent: self.grad_frames_sent.load(Relaxed),
            grad_bytes_sent: self.grad_bytes_sent.load(Relaxed),
            grad_bytes_received: self.grad_bytes_received.load(Relaxed),
            payload_sent_by_type: std::array::from_fn(|i| self.payload_sent_by_type[i].load(Relaxed)),
        }
    }
}

impl MeterSnapshot {
    pub fn payload_sent_for(&self, t: MsgType) -> u64 {
        self.payload_sent_by_type[t as usize]
    }
}

impl Sub for MeterSnapshot {
    type Output = MeterSnapshot;

    fn sub(self, rhs: Self) -> Self {
        MeterSnapshot {
            frames_sent: self.frames_sent - rhs.frames_sent,
            frame_bytes_sent: self.frame_bytes_sent - rhs.frame_bytes_sent,
            payload_sent: self.payload_sent - rhs.payload_sent,
            frames_received: self.frames_received - rhs.frames_received,
            frame_bytes_received: self.frame_bytes_received - rhs.frame_bytes_received,
            payload_received: self.payload_received - rhs.payload_received,
            grad_frames_sent: self.grad_frames_sent - rhs.grad_frames_sent,
            grad_bytes_sent: self.grad_bytes_sent - rhs.grad_bytes_sent,
            grad_bytes_received: self.grad_bytes_received - rhs.grad_bytes_received,
            payload_sent_by_type: std::array::from_fn(|i| {
                self.payload_sent_by_type[i] - rhs.payload_sent_by_type[i]
            }),
        }
    }
}
