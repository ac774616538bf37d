//! CSV and key-value outputs, and the peak-memory probe.

use std::fs::OpenOptions;
use std::path::Path;

use tangentconv::train::{EpochStats, Metrics};

use crate::error::CliError;

/// Append epochs to `loss.csv`-style files; the header is written once.
pub fn append_losses(path: &Path, stats: &[EpochStats]) -> Result<(), CliError> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(["epoch", "mean_loss", "batches", "seconds"])?;
    }
    for s in stats {
        // timing is left out on purpose so that reruns compare byte for byte
        w.write_record([
            s.epoch.to_string(),
            format!("{:e}", s.mean_loss),
            s.batches.to_string(),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_confusion(path: &Path, m: &Metrics) -> Result<(), CliError> {
    let n = m.confusion.classes;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["truth\\pred".to_string()];
    header.extend((0..n).map(|c| c.to_string()));
    w.write_record(&header)?;
    for t in 0..n {
        let mut row = vec![t.to_string()];
        row.extend((0..n).map(|p| m.confusion.get(t, p).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_class_metrics(path: &Path, m: &Metrics) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "accuracy", "iou", "points"])?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for c in 0..m.confusion.classes {
        w.write_record([
            c.to_string(),
            fmt(m.class_accuracy[c]),
            fmt(m.class_iou[c]),
            m.confusion.row_sum(c).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `key=value` lines, one per entry, in the given order.
pub fn write_metadata(path: &Path, pairs: &[(String, String)]) -> Result<(), CliError> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(&v.replace('\n', " "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Summary line for the console.
pub fn metrics_line(m: &Metrics) -> String {
    format!(
        "oA={:.4} mA={:.4} mIoU={:.4} points={} (class means over classes present)",
        m.overall_accuracy,
        m.mean_accuracy,
        m.mean_iou,
        m.confusion.total()
    )
}

/// Peak resident set size in bytes, read from `/proc/self/status`.
/// Approximate, and `None` where the file is unavailable.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
