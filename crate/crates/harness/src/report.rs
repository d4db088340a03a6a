//! Writes a run to disk: one metrics CSV per node (`node-<i>.csv`, see the
//! node crate for columns) and a `summary.txt`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use onebyte_core::params::digest_hex;
use onebyte_node::metrics::write_csv;
use thiserror::Error;

use crate::cluster::RunReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: onebyte_node::metrics::CsvError },
}

pub fn summary(report: &RunReport) -> String {
    let mut s = String::new();
    writeln!(s, "wall_ms {}", report.wall.as_millis()).unwrap();
    writeln!(s, "status {}", report.failed.as_deref().unwrap_or("ok")).unwrap();
    writeln!(s, "replicas_agree {}", report.replicas_agree()).unwrap();
    for n in &report.nodes {
        let r = &n.report;
        let last_loss = r.metrics.iter().rev().find_map(|m| m.loss);
        writeln!(
            s,
            "node {} key={} outcome={:?} iter={} digest={} payload_sent={} payload_received={} grad_bytes_sent={} loss={}",
            n.index,
            r.key,
            r.outcome,
            r.cur_iter,
            digest_hex(&r.digest),
            r.meter.payload_sent,
            r.meter.payload_received,
            r.meter.grad_bytes_sent,
            last_loss.map_or("-".to_string(), |l| format!("{l:.6}")),
        )
        .unwrap();
    }
    for n in &report.nodes {
        for e in &n.report.events {
            writeln!(s, "event node={} {e}", n.index).unwrap();
        }
    }
    s
}

pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for n in &report.nodes {
        let path = dir.join(format!("node-{}.csv", n.index));
        let f = File::create(&path).map_err(io(&path))?;
        write_csv(&n.report.metrics, f).map_err(|source| ReportError::Csv { path: path.clone(), source })?;
        written.push(path);
    }
    let path = dir.join("summary.txt");
    File::create(&path)
        .and_then(|mut f| f.write_all(summary(report).as_bytes()))
        .map_err(io(&path))?;
    written.push(path);
    Ok(written)
}
