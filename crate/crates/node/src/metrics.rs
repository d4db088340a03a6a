//! Per-iteration metrics rows and their CSV form.
//!
//! Columns: `iter,loss,bytes_sent,bytes_received,live_peers,wall_ms`. Bytes are
//! frame payload bytes counted by the transport since the previous row; the
//! first row includes join traffic and the last row includes traffic after
//! the final iteration. `loss` is the held-out loss after the iteration's
//! update, empty when not evaluated.

use std::io::{Read, Write};

pub use csv::Error as CsvError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: u64,
    pub loss: Option<f64>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub live_peers: usize,
    pub wall_ms: u64,
}

pub fn write_csv<W: Write>(rows: &[IterationMetrics], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["iter", "loss", "bytes_sent", "bytes_received", "live_peers", "wall_ms"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> csv::Result<Vec<IterationMetrics>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
