//! Round-log CSV stream. The column set is fixed; bump [`CSV_SCHEMA_VERSION`]
//! on any change so downstream readers can refuse files they do not know.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::RoundLog;
use crate::error::{Error, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 8] = [
    "round",
    "algo",
    "tau",
    "dual_gap",
    "primal_gap",
    "test_acc",
    "local_steps",
    "participants",
];

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub algo: String,
    pub tau: usize,
    pub dual_gap: Option<f64>,
    pub primal_gap: f64,
    pub test_acc: Option<f64>,
    pub local_steps: usize,
    pub participants: String,
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Space-separated ids; accelerated rounds write `I1|I2`.
pub fn format_participants(log: &RoundLog) -> String {
    match &log.participants2 {
        Some(second) => format!("{}|{}", join_ids(&log.participants), join_ids(second)),
        None => join_ids(&log.participants),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub struct CsvLogger<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvLogger<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(CSV_HEADER).map_err(csv_err)?;
        Ok(CsvLogger { inner })
    }

    /// Writes and flushes one row so partial runs leave a readable file.
    pub fn write(&mut self, log: &RoundLog) -> Result<()> {
        self.inner
            .write_record([
                log.round.to_string(),
                log.algo.as_str().to_string(),
                log.tau.to_string(),
                opt(log.dual_gap),
                log.primal_gap.to_string(),
                opt(log.test_acc),
                log.local_steps.to_string(),
                format_participants(log),
            ])
            .map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Stream(std::io::Error::other(e.to_string())))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Stream(std::io::Error::other(e.to_string()))
}

/// Reads a round-log CSV, checking the header.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.deserialize().enumerate() {
        rows.push(rec.map_err(|e| Error::Parse {
            line: k + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}
