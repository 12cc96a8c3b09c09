//! Persistence, evaluation, export, sweeps and run configuration.

pub mod checkpoint;
mod config;
mod eval;

use std::io::Write;

use serde::Serialize;

use crate::error::Result;

pub use config::{DataConfig, RunConfig};
pub use eval::{
    argmax_rows, capture_attention, evaluate, export_config, export_submodel, run_sweep, EvalResult, MetricsRow,
    EVAL_CHUNK,
};

/// Header row plus one record per row, `\n` terminated.
pub fn write_csv<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(rows: &[T], path: impl AsRef<std::path::Path>) -> Result<()> {
    write_csv(rows, std::fs::File::create(path)?)
}
