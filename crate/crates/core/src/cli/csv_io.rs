//! CSV schemas for the train log, CG trace, and benchmark table.
//!
//! Floats are written with Rust's shortest round-trip formatting (switching
//! to exponent notation for very large or small magnitudes), so parsing a
//! file back yields bit-identical values.

use std::io::{Read, Write};

use crate::cg::CgReport;
use crate::trainer::LossRecord;
use crate::{Error, Result};

pub const TRAIN_LOG_HEADER: [&str; 8] = [
    "step",
    "epoch",
    "loss",
    "accuracy",
    "grad_norm",
    "cg_iters_total",
    "fv_calls",
    "elapsed_ms",
];
pub const CG_TRACE_HEADER: [&str; 2] = ["k", "rho"];
pub const BENCH_HEADER: [&str; 7] = ["method", "n_a", "n_g", "batch", "flops", "peak_floats", "wall_ms"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub n_a: usize,
    pub n_g: usize,
    pub batch: usize,
    pub flops: u64,
    pub peak_floats: u64,
    pub wall_ms: f64,
}

/// Shortest string that parses back to exactly `x`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub struct TrainLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrainLogWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(TRAIN_LOG_HEADER)?;
        Ok(TrainLogWriter { inner })
    }

    pub fn write(&mut self, r: &LossRecord) -> Result<()> {
        self.inner.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            fmt_f64(r.loss),
            r.accuracy.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.grad_norm),
            r.cg_iters_total.to_string(),
            r.fv_calls.to_string(),
            fmt_f64(r.elapsed_ms),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(field: &str, column: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{field}` in column {column}")))
}

fn reader<R: Read>(input: R, header: &[&str]) -> Result<csv::Reader<R>> {
    let mut rdr = csv::Reader::from_reader(input);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Config(format!(
            "unexpected CSV header {found:?}, expected {header:?}"
        )));
    }
    Ok(rdr)
}

pub fn read_train_log<R: Read>(input: R) -> Result<Vec<LossRecord>> {
    let mut rdr = reader(input, &TRAIN_LOG_HEADER)?;
    rdr.records()
        .map(|row| {
            let row = row?;
            Ok(LossRecord {
                step: parse(&row[0], "step")?,
                epoch: parse(&row[1], "epoch")?,
                loss: parse(&row[2], "loss")?,
                accuracy: if row[3].is_empty() {
                    None
                } else {
                    Some(parse(&row[3], "accuracy")?)
                },
                grad_norm: parse(&row[4], "grad_norm")?,
                cg_iters_total: parse(&row[5], "cg_iters_total")?,
                fv_calls: parse(&row[6], "fv_calls")?,
                elapsed_ms: parse(&row[7], "elapsed_ms")?,
            })
        })
        .collect()
}

pub fn write_cg_trace<W: Write>(out: W, report: &CgReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CG_TRACE_HEADER)?;
    for (k, rho) in report.rho_history.iter().enumerate() {
        w.write_record([k.to_string(), fmt_f64(*rho)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cg_trace<R: Read>(input: R) -> Result<Vec<(usize, f64)>> {
    let mut rdr = reader(input, &CG_TRACE_HEADER)?;
    rdr.records()
        .map(|row| {
            let row = row?;
            Ok((parse(&row[0], "k")?, parse(&row[1], "rho")?))
        })
        .collect()
}

pub fn write_bench<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.n_a.to_string(),
            r.n_g.to_string(),
            r.batch.to_string(),
            r.flops.to_string(),
            r.peak_floats.to_string(),
            fmt_f64(r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench<R: Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut rdr = reader(input, &BENCH_HEADER)?;
    rdr.records()
        .map(|row| {
            let row = row?;
            Ok(BenchRow {
                method: row[0].to_owned(),
                n_a: parse(&row[1], "n_a")?,
                n_g: parse(&row[2], "n_g")?,
                batch: parse(&row[3], "batch")?,
                flops: parse(&row[4], "flops")?,
                peak_floats: parse(&row[5], "peak_floats")?,
                wall_ms: parse(&row[6], "wall_ms")?,
            })
        })
        .collect()
}
