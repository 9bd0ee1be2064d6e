use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// Fixed leading columns of the metrics CSV; one `class_acc_k` column per
/// class follows.
pub const CSV_BASE_COLUMNS: [&str; 8] = [
    "step",
    "epoch",
    "mean_train_loss",
    "robust_train_loss",
    "sampler_entropy",
    "worst_class_acc",
    "grad_norm",
    "wall_time_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: f64,
    pub mean_train_loss: f64,
    /// KL robust loss of the stale loss vector.
    pub robust_train_loss: f64,
    /// Shannon entropy (nats) of the sampling distribution.
    pub sampler_entropy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub worst_class_accuracy: f64,
    pub grad_norm: f64,
    pub wall_time_ms: f64,
}

pub fn csv_header(num_classes: usize) -> String {
    let mut cols: Vec<String> = CSV_BASE_COLUMNS.iter().map(|c| c.to_string()).collect();
    cols.extend((0..num_classes).map(|k| format!("class_acc_{k}")));
    cols.join(",")
}

/// Writes the header and one row per record. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_metrics_csv<W: Write>(
    mut out: W,
    records: &[MetricsRecord],
    num_classes: usize,
) -> io::Result<()> {
    writeln!(out, "{}", csv_header(num_classes))?;
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.mean_train_loss,
            r.robust_train_loss,
            r.sampler_entropy,
            r.worst_class_accuracy,
            r.grad_norm,
            r.wall_time_ms
        )?;
        for k in 0..num_classes {
            match r.per_class_accuracy.get(k) {
                Some(a) => write!(out, ",{a}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
