//! Metric tables and image slices on disk.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// One row of a long-format metrics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub run: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("csv output to {}: {other:?}", path.display())),
    }
}

/// Writes `run,step,metric,value` rows with a header.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a two-column table such as a spectrum or a profile.
pub fn write_series_csv(path: &Path, header: [&str; 2], x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(shape_err!("series columns of length {} and {}", x.len(), y.len()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for (a, b) in x.iter().zip(y) {
        w.write_record([a.to_string(), b.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the plane `z = index` of one channel of a `[C, X, Y, Z]` field as
/// an 8-bit binary PGM, linearly mapping `[lo, hi]` to `[0, 255]`.
pub fn write_pgm_slice(
    path: &Path,
    field: &Tensor<f64>,
    channel: usize,
    index: usize,
    range: (f64, f64),
) -> Result<()> {
    let sh = field.shape();
    if sh.len() != 4 || channel >= sh[0] || index >= sh[3] {
        return Err(shape_err!("slice {channel}/{index} of {:?}", sh));
    }
    let (lo, hi) = range;
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let (nx, ny, nz) = (sh[1], sh[2], sh[3]);
    let mut bytes = format!("P5\n{ny} {nx}\n255\n").into_bytes();
    let data = field.data();
    for x in 0..nx {
        for y in 0..ny {
            let v = data[((channel * nx + x) * ny + y) * nz + index];
            bytes.push(((v - lo) * scale).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
