//! Frame format and message vocabulary exchanged between peers.
//!
//! ```text
//! frame   = magic "JOB1" | version u8 (=1) | msg_type u8 | payload_len u32 BE | payload
//! string  = len u16 BE | UTF-8 bytes
//! grads   = mode u8 (0 = f32 BE, 1 = one byte) | count u16 BE | count × (4 | 1) bytes
//! ```
//!
//! Integers are big-endian. Parameter payloads (`WEIGHTS_RESPONSE`) are
//! little-endian `f32`, the same serialization the checksum hashes.

use thiserror::Error;

use crate::codec::{decode, CodecError, CompandRange, GradByte};

pub const MAGIC: [u8; 4] = *b"JOB1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("malformed {msg}: {reason}")]
    Malformed { msg: &'static str, reason: String },
    #[error("{what} count {count} does not fit in u16")]
    TooMany { what: &'static str, count: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Join = 0x01,
    PeerList = 0x02,
    AnnouncePeer = 0x03,
    Sync = 0x04,
    GradsRequest = 0x05,
    GradsResponse = 0x06,
    ChecksumRequest = 0x07,
    ChecksumResponse = 0x08,
    WeightsRequest = 0x09,
    WeightsResponse = 0x0A,
    HistoryRequest = 0x0B,
    HistoryResponse = 0x0C,
    ReceivedSet = 0x0D,
    Hello = 0x0E,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Result<Self, WireError> {
        use MsgType::*;
        Ok(match b {
            0x01 => Join,
            0x02 => PeerList,
            0x03 => AnnouncePeer,
            0x04 => Sync,
            0x05 => GradsRequest,
            0x06 => GradsResponse,
            0x07 => ChecksumRequest,
            0x08 => ChecksumResponse,
            0x09 => WeightsRequest,
            0x0A => WeightsResponse,
            0x0B => HistoryRequest,
            0x0C => HistoryResponse,
            0x0D => ReceivedSet,
            0x0E => Hello,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SyncPhase {
    PerformedInferences = 0,
    AppliedGradients = 1,
    /// Sent once after the final iteration so peers can linger until
    /// everyone has finished its last checksum exchange.
    Finished = 2,
}

impl SyncPhase {
    fn from_u8(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(Self::PerformedInferences),
            1 => Ok(Self::AppliedGradients),
            2 => Ok(Self::Finished),
            _ => Err(malformed("SYNC", format!("phase {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradPayload {
    F32(Vec<f32>),
    OneByte(Vec<GradByte>),
}

impl GradPayload {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::OneByte(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> u8 {
        match self {
            Self::F32(_) => 0,
            Self::OneByte(_) => 1,
        }
    }

    /// Bytes of gradient data carried (excluding mode and count).
    pub fn data_len(&self) -> usize {
        match self {
            Self::F32(v) => v.len() * 4,
            Self::OneByte(v) => v.len(),
        }
    }

    /// Values every replica applies.
    pub fn values(&self, range: &CompandRange) -> Vec<f32> {
        match self {
            Self::F32(v) => v.clone(),
            Self::OneByte(codes) => codes.iter().map(|c| decode(*c, range) as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerEntry {
    pub machine_time: u64,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    pub machine_time: u64,
    pub address: String,
    pub grads: GradPayload,
}

/// One applied iteration as kept for catch-up.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRecord {
    pub iteration: u64,
    pub entries: Vec<RecordEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Join { machine_time: u64, address: String },
    PeerList { cur_iter: u64, peers: Vec<PeerEntry> },
    /// `start_iter` is the first iteration the peer takes part in; a joiner
    /// sends 0 and the bootstrap peer fills it in when forwarding.
    AnnouncePeer {
        machine_time: u64,
        address: String,
        start_iter: u64,
    },
    Sync { phase: SyncPhase, machine_time: u64, iteration: u64 },
    GradsRequest { iteration: u64 },
    GradsResponse { iteration: u64, machine_time: u64, grads: GradPayload },
    ChecksumRequest { iteration: u64 },
    ChecksumResponse { iteration: u64, digest: [u8; 32] },
    WeightsRequest { offset: u64, length: u64 },
    WeightsResponse { iteration: u64, offset: u64, values: Vec<f32> },
    HistoryRequest { from_iter: u64, to_iter: u64 },
    HistoryResponse { records: Vec<LedgerRecord> },
    ReceivedSet { iteration: u64, members: Vec<PeerEntry> },
    Hello {
        machine_time: u64,
        address: String,
        dimension: u64,
        quantized: bool,
        g_min: f64,
        g_max: f64,
    },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Self::Join { .. } => MsgType::Join,
            Self::PeerList { .. } => MsgType::PeerList,
            Self::AnnouncePeer { .. } => MsgType::AnnouncePeer,
            Self::Sync { .. } => MsgType::Sync,
            Self::GradsRequest { .. } => MsgType::GradsRequest,
            Self::GradsResponse { .. } => MsgType::GradsResponse,
            Self::ChecksumRequest { .. } => MsgType::ChecksumRequest,
            Self::ChecksumResponse { .. } => MsgType::ChecksumResponse,
            Self::WeightsRequest { .. } => MsgType::WeightsRequest,
            Self::WeightsResponse { .. } => MsgType::WeightsResponse,
            Self::HistoryRequest { .. } => MsgType::HistoryRequest,
            Self::HistoryResponse { .. } => MsgType::HistoryResponse,
            Self::ReceivedSet { .. } => MsgType::ReceivedSet,
            Self::Hello { .. } => MsgType::Hello,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: u8,
    pub payload_len: usize,
}

impl FrameHeader {
    /// `Ok(None)` until `HEADER_LEN` bytes are available.
    pub fn parse(buf: &[u8]) -> Result<Option<Self>, WireError> {
        if buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let magic: [u8; 4] = buf[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if buf[4] != VERSION {
            return Err(WireError::BadVersion(buf[4]));
        }
        let payload_len = u32::from_be_bytes(buf[6..10].try_into().unwrap()) as usize;
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(payload_len));
        }
        Ok(Some(Self {
            msg_type: buf[5],
            payload_len,
        }))
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload_len
    }
}

/// Gradient bytes carried by a `GRADS_RESPONSE` frame, or 0 for other types.
pub fn gradient_bytes_in_frame(frame: &[u8]) -> usize {
    match FrameHeader::parse(frame) {
        Ok(Some(h)) if h.msg_type == MsgType::GradsResponse as u8 => {
            // iteration u64 + machine_time u64 + mode u8 + count u16
            h.payload_len.saturating_sub(19)
        }
        _ => 0,
    }
}

fn malformed(msg: &'static str, reason: impl Into<String>) -> WireError {
    WireError::Malformed {
        msg,
        reason: reason.into(),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn count(&mut self, what: &'static str, n: usize) -> Result<(), WireError> {
        let n = u16::try_from(n).map_err(|_| WireError::TooMany { what, count: n })?;
        self.u16(n);
        Ok(())
    }
    fn string(&mut self, s: &str) -> Result<(), WireError> {
        self.count("string byte", s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn grads(&mut self, g: &GradPayload) -> Result<(), WireError> {
        self.u8(g.mode());
        self.count("gradient", g.len())?;
        match g {
            GradPayload::F32(v) => v.iter().for_each(|x| self.0.extend_from_slice(&x.to_be_bytes())),
            GradPayload::OneByte(v) => v.iter().for_each(|c| self.0.push(c.to_wire())),
        }
        Ok(())
    }
}

struct Reader<'a> {
    msg: &'static str,
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(malformed(self.msg, format!("needs {n} more bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| malformed(self.msg, e.to_string()))
    }
    fn grads(&mut self) -> Result<GradPayload, WireError> {
        let mode = self.u8()?;
        let n = self.u16()? as usize;
        match mode {
            0 => Ok(GradPayload::F32(
                self.take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
                    .collect(),
            )),
            1 => Ok(GradPayload::OneByte(
                self.take(n)?
                    .iter()
                    .map(|b| GradByte::from_wire(*b))
                    .collect::<Result<_, _>>()?,
            )),
            m => Err(malformed(self.msg, format!("gradient mode {m}"))),
        }
    }
    fn peers(&mut self) -> Result<Vec<PeerEntry>, WireError> {
        let n = self.u16()? as usize;
        (0..n)
            .map(|_| {
                Ok(PeerEntry {
                    machine_time: self.u64()?,
                    address: self.string()?,
                })
            })
            .collect()
    }
    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(malformed(self.msg, format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn encode_payload(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut w = Writer(Vec::new());
    match msg {
        Message::Join { machine_time, address } => {
            w.u64(*machine_time);
            w.string(address)?;
        }
        Message::AnnouncePeer {
            machine_time,
            address,
            start_iter,
        } => {
            w.u64(*machine_time);
            w.string(address)?;
            w.u64(*start_iter);
        }
        Message::PeerList { cur_iter, peers } => {
            w.u64(*cur_iter);
            w.count("peer", peers.len())?;
            for p in peers {
                w.u64(p.machine_time);
                w.string(&p.address)?;
            }
        }
        Message::Sync {
            phase,
            machine_time,
            iteration,
        } => {
            w.u8(*phase as u8);
            w.u64(*machine_time);
            w.u64(*iteration);
        }
        Message::GradsRequest { iteration } | Message::ChecksumRequest { iteration } => w.u64(*iteration),
        Message::GradsResponse {
            iteration,
            machine_time,
            grads,
        } => {
            w.u64(*iteration);
            w.u64(*machine_time);
            w.grads(grads)?;
        }
        Message::ChecksumResponse { iteration, digest } => {
            w.u64(*iteration);
            w.0.extend_from_slice(digest);
        }
        Message::WeightsRequest { offset, length } => {
            w.u64(*offset);
            w.u64(*length);
        }
        Message::WeightsResponse {
            iteration,
            offset,
            values,
        } => {
            w.u64(*iteration);
            w.u64(*offset);
            values.iter().for_each(|v| w.0.extend_from_slice(&v.to_le_bytes()));
        }
        Message::HistoryRequest { from_iter, to_iter } => {
            w.u64(*from_iter);
            w.u64(*to_iter);
        }
        Message::HistoryResponse { records } => {
            w.count("ledger record", records.len())?;
            for r in records {
                w.u64(r.iteration);
                w.count("ledger entry", r.entries.len())?;
                for e in &r.entries {
                    w.u64(e.machine_time);
                    w.string(&e.address)?;
                    w.grads(&e.grads)?;
                }
            }
        }
        Message::ReceivedSet { iteration, members } => {
            w.u64(*iteration);
            w.count("member", members.len())?;
            for p in members {
                w.u64(p.machine_time);
                w.string(&p.address)?;
            }
        }
        Message::Hello {
            machine_time,
            address,
            dimension,
            quantized,
            g_min,
            g_max,
        } => {
            w.u64(*machine_time);
            w.string(address)?;
            w.u64(*dimension);
            w.u8(u8::from(*quantized));
            w.u64(g_min.to_bits());
            w.u64(g_max.to_bits());
        }
    }
    Ok(w.0)
}

/// Serializes `msg` into a complete frame.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = encode_payload(msg)?;
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(payload.len()));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(msg.msg_type() as u8);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

fn decode_payload(msg_type: MsgType, payload: &[u8]) -> Result<Message, WireError> {
    let name = match msg_type {
        MsgType::Join => "JOIN",
        MsgType::PeerList => "PEER_LIST",
        MsgType::AnnouncePeer => "ANNOUNCE_PEER",
        MsgType::Sync => "SYNC",
        MsgType::GradsRequest => "GRADS_REQUEST",
        MsgType::GradsResponse => "GRADS_RESPONSE",
        MsgType::ChecksumRequest => "CHECKSUM_REQUEST",
        MsgType::ChecksumResponse => "CHECKSUM_RESPONSE",
        MsgType::WeightsRequest => "WEIGHTS_REQUEST",
        MsgType::WeightsResponse => "WEIGHTS_RESPONSE",
        MsgType::HistoryRequest => "HISTORY_REQUEST",
        MsgType::HistoryResponse => "HISTORY_RESPONSE",
        MsgType::ReceivedSet => "RECEIVED_SET",
        MsgType::Hello => "HELLO",
    };
    let mut r = Reader { msg: name, buf: payload };
    let msg = match msg_type {
        MsgType::Join => Message::Join {
            machine_time: r.u64()?,
            address: r.string()?,
        },
        MsgType::AnnouncePeer => Message::AnnouncePeer {
            machine_time: r.u64()?,
            address: r.string()?,
            start_iter: r.u64()?,
        },
        MsgType::PeerList => Message::PeerList {
            cur_iter: r.u64()?,
            peers: r.peers()?,
        },
        MsgType::Sync => Message::Sync {
            phase: SyncPhase::from_u8(r.u8()?)?,
            machine_time: r.u64()?,
            iteration: r.u64()?,
        },
        MsgType::GradsRequest => Message::GradsRequest { iteration: r.u64()? },
        MsgType::ChecksumRequest => Message::ChecksumRequest { iteration: r.u64()? },
        MsgType::GradsResponse => Message::GradsResponse {
            iteration: r.u64()?,
            machine_time: r.u64()?,
            grads: r.grads()?,
        },
        MsgType::ChecksumResponse => Message::ChecksumResponse {
            iteration: r.u64()?,
            digest: r.take(32)?.try_into().unwrap(),
        },
        MsgType::WeightsRequest => Message::WeightsRequest {
            offset: r.u64()?,
            length: r.u64()?,
        },
        MsgType::WeightsResponse => {
            let iteration = r.u64()?;
            let offset = r.u64()?;
            let rest = r.take(r.buf.len())?;
            if rest.len() % 4 != 0 {
                return Err(malformed(name, "parameter bytes not a multiple of 4"));
            }
            Message::WeightsResponse {
                iteration,
                offset,
                values: rest
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            }
        }
        MsgType::HistoryRequest => Message::HistoryRequest {
            from_iter: r.u64()?,
            to_iter: r.u64()?,
        },
        MsgType::HistoryResponse => {
            let n = r.u16()? as usize;
            let mut records = Vec::with_capacity(n);
            for _ in 0..n {
                let iteration = r.u64()?;
                let m = r.u16()? as usize;
                let mut entries = Vec::with_capacity(m);
                for _ in 0..m {
                    entries.push(RecordEntry {
                        machine_time: r.u64()?,
                        address: r.string()?,
                        grads: r.grads()?,
                    });
                }
                records.push(LedgerRecord { iteration, entries });
            }
            Message::HistoryResponse { records }
        }
        MsgType::ReceivedSet => Message::ReceivedSet {
            iteration: r.u64()?,
            members: r.peers()?,
        },
        MsgType::Hello => Message::Hello {
            machine_time: r.u64()?,
            address: r.string()?,
            dimension: r.u64()?,
            quantized: match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(malformed(name, format!("quantized flag {b}"))),
            },
            g_min: f64::from_bits(r.u64()?),
            g_max: f64::from_bits(r.u64()?),
        },
    };
    r.finish()?;
    Ok(msg)
}

/// Decodes the first frame in `buf`. `Ok(None)` means more bytes are needed;
/// otherwise returns the message and the number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Message, usize)>, WireError> {
    let Some(header) = FrameHeader::parse(buf)? else {
        return Ok(None);
    };
    let msg_type = MsgType::from_u8(header.msg_type)?;
    let end = header.frame_len();
    if buf.len() < end {
        return Ok(None);
    }
    let msg = decode_payload(msg_type, &buf[HEADER_LEN..end])?;
    Ok(Some((msg, end)))
}

/// Decodes exactly one complete frame.
pub fn decode_message(frame: &[u8]) -> Result<Message, WireError> {
    match decode_frame(frame)? {
        Some((msg, used)) if used == frame.len() => Ok(msg),
        Some((_, used)) => Err(malformed("frame", format!("{} bytes after frame", frame.len() - used))),
        None => {
            let needed = FrameHeader::parse(frame)?.map_or(HEADER_LEN, |h| h.frame_len());
            Err(WireError::Truncated {
                needed,
                have: frame.len(),
            })
        }
    }
}

/// Reassembles frames from a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete raw frame, if any. Header errors are fatal for the stream.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        let Some(header) = FrameHeader::parse(&self.buf)? else {
            return Ok(None);
        };
        let len = header.frame_len();
        if self.buf.len() < len {
            return Ok(None);
        }
        let rest = self.buf.split_off(len);
        Ok(Some(std::mem::replace(&mut self.buf, rest)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sync_golden_frame() {
        let frame = encode_message(&Message::Sync {
            phase: SyncPhase::PerformedInferences,
            machine_time: 5,
            iteration: 9,
        })
        .unwrap();
        let expected: Vec<u8> = [
            &b"JOB1"[..],
            &[1, 0x04, 0, 0, 0, 17],
            &[0],
            &5u64.to_be_bytes(),
            &9u64.to_be_bytes(),
        ]
        .concat();
        assert_eq!(frame.len(), 6 + 4 + 17);
        assert_eq!(frame, expected);
        assert_eq!(
            decode_message(&frame).unwrap(),
            Message::Sync {
                phase: SyncPhase::PerformedInferences,
                machine_time: 5,
                iteration: 9
            }
        );
    }

    #[test]
    fn one_byte_grads_carry_count_bytes() {
        let codes: Vec<GradByte> = (-3..5).map(|c| GradByte::new(c).unwrap()).collect();
        let frame = encode_message(&Message::GradsResponse {
            iteration: 1,
            machine_time: 2,
            grads: GradPayload::OneByte(codes),
        })
        .unwrap();
        assert_eq!(frame.len(), HEADER_LEN + 8 + 8 + 1 + 2 + 8);
        assert_eq!(gradient_bytes_in_frame(&frame), 8);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut frame = encode_message(&Message::GradsRequest { iteration: 3 }).unwrap();
        frame[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_message(&frame), Err(WireError::BadMagic(*b"XXXX")));

        let mut frame = encode_message(&Message::GradsRequest { iteration: 3 }).unwrap();
        frame[4] = 2;
        assert_eq!(decode_message(&frame), Err(WireError::BadVersion(2)));

        let mut frame = encode_message(&Message::GradsRequest { iteration: 3 }).unwrap();
        frame[5] = 0x7F;
        assert_eq!(decode_message(&frame), Err(WireError::UnknownType(0x7F)));

        let mut frame = encode_message(&Message::GradsRequest { iteration: 3 }).unwrap();
        frame[6..10].copy_from_slice(&((MAX_PAYLOAD + 1) as u32).to_be_bytes());
        assert_eq!(decode_frame(&frame), Err(WireError::PayloadTooLarge(MAX_PAYLOAD + 1)));
    }

    #[test]
    fn truncated_frames_need_more() {
        let frame = encode_message(&Message::ChecksumRequest { iteration: 77 }).unwrap();
        for cut in 0..frame.len() {
            assert_eq!(decode_frame(&frame[..cut]), Ok(None));
        }
        assert!(matches!(
            decode_message(&frame[..frame.len() - 1]),
            Err(WireError::Truncated { .. })
        ));
    }

    #[test]
    fn reserved_code_rejected_on_decode() {
        let mut frame = encode_message(&Message::GradsResponse {
            iteration: 0,
            machine_time: 0,
            grads: GradPayload::OneByte(vec![GradByte::ZERO]),
        })
        .unwrap();
        *frame.last_mut().unwrap() = 0x80;
        assert!(matches!(decode_message(&frame), Err(WireError::Codec(_))));
    }

    #[test]
    fn stream_decoder_splits_frames() {
        let a = encode_message(&Message::GradsRequest { iteration: 1 }).unwrap();
        let b = encode_message(&Message::Join {
            machine_time: 4,
            address: "127.0.0.1:9000".into(),
        })
        .unwrap();
        let stream = [a.clone(), b.clone()].concat();
        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        for chunk in stream.chunks(3) {
            dec.extend(chunk);
            while let Some(f) = dec.next_frame().unwrap() {
                out.push(f);
            }
        }
        assert_eq!(out, vec![a, b]);
    }

    fn finite_f32() -> impl Strategy<Value = f32> {
        prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL
    }

    fn grads() -> impl Strategy<Value = GradPayload> {
        prop_oneof![
            prop::collection::vec(finite_f32(), 0..40).prop_map(GradPayload::F32),
            prop::collection::vec((-127i16..=127).prop_map(|c| GradByte::new(c).unwrap()), 0..40)
                .prop_map(GradPayload::OneByte),
        ]
    }

    fn peer() -> impl Strategy<Value = PeerEntry> {
        (any::<u64>(), "[a-z0-9.:-]{0,24}").prop_map(|(machine_time, address)| PeerEntry { machine_time, address })
    }

    fn message() -> impl Strategy<Value = Message> {
        let record = (
            any::<u64>(),
            prop::collection::vec(
                (any::<u64>(), "[a-z0-9:]{0,12}", grads()).prop_map(|(machine_time, address, grads)| RecordEntry {
                    machine_time,
                    address,
                    grads,
                }),
                0..4,
            ),
        )
            .prop_map(|(iteration, entries)| LedgerRecord { iteration, entries });
        prop_oneof![
            (any::<u64>(), "\\PC{0,16}").prop_map(|(machine_time, address)| Message::Join { machine_time, address }),
            (any::<u64>(), prop::collection::vec(peer(), 0..6))
                .prop_map(|(cur_iter, peers)| Message::PeerList { cur_iter, peers }),
            (any::<u64>(), "\\PC{0,16}", any::<u64>()).prop_map(|(machine_time, address, start_iter)| {
                Message::AnnouncePeer {
                    machine_time,
                    address,
                    start_iter,
                }
            }),
            (0u8..3, any::<u64>(), any::<u64>()).prop_map(|(p, machine_time, iteration)| Message::Sync {
                phase: SyncPhase::from_u8(p).unwrap(),
                machine_time,
                iteration
            }),
            any::<u64>().prop_map(|iteration| Message::GradsRequest { iteration }),
            (any::<u64>(), any::<u64>(), grads()).prop_map(|(iteration, machine_time, grads)| {
                Message::GradsResponse {
                    iteration,
                    machine_time,
                    grads,
                }
            }),
            any::<u64>().prop_map(|iteration| Message::ChecksumRequest { iteration }),
            (any::<u64>(), any::<[u8; 32]>())
                .prop_map(|(iteration, digest)| Message::ChecksumResponse { iteration, digest }),
            (any::<u64>(), any::<u64>()).prop_map(|(offset, length)| Message::WeightsRequest { offset, length }),
            (any::<u64>(), any::<u64>(), prop::collection::vec(finite_f32(), 0..64)).prop_map(
                |(iteration, offset, values)| Message::WeightsResponse {
                    iteration,
                    offset,
                    values
                }
            ),
            (any::<u64>(), any::<u64>())
                .prop_map(|(from_iter, to_iter)| Message::HistoryRequest { from_iter, to_iter }),
            prop::collection::vec(record, 0..4).prop_map(|records| Message::HistoryResponse { records }),
            (any::<u64>(), prop::collection::vec(peer(), 0..6))
                .prop_map(|(iteration, members)| Message::ReceivedSet { iteration, members }),
            (any::<u64>(), "\\PC{0,16}", any::<u64>(), any::<bool>(), 1e-12f64..1.0, 1.0f64..1e6).prop_map(
                |(machine_time, address, dimension, quantized, g_min, g_max)| Message::Hello {
                    machine_time,
                    address,
                    dimension,
                    quantized,
                    g_min,
                    g_max
                }
            ),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(msg in message()) {
            let frame = encode_message(&msg).unwrap();
            let header = FrameHeader::parse(&frame).unwrap().unwrap();
            prop_assert_eq!(header.frame_len(), frame.len());
            prop_assert_eq!(decode_message(&frame).unwrap(), msg);
        }

        #[test]
        fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut framed = b"JOB1\x01".to_vec();
            framed.extend_from_slice(&bytes);
            let _ = decode_frame(&bytes);
            let _ = decode_frame(&framed);
        }
    }
}
