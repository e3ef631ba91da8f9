//! `runs.csv` persistence.
//!
//! Columns: `config_hash,n,trial,eta,risk_exact,risk_mc,wall_ms,seed`. Reals
//! are written with 17 significant digits so they read back bit for bit; a
//! failed trial has `NaN` risk, and an absent Monte-Carlo risk is empty.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUN_COLUMNS: [&str; 8] = ["config_hash", "n", "trial", "eta", "risk_exact", "risk_mc", "wall_ms", "seed"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub n: usize,
    pub trial: usize,
    pub eta: f64,
    pub risk_exact: f64,
    pub risk_mc: Option<f64>,
    pub wall_ms: u64,
    pub seed: u64,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.risk_exact.is_nan()
    }
}

/// Bitwise equality, so records with `NaN` risk compare equal to themselves.
impl PartialEq for RunRecord {
    fn eq(&self, o: &Self) -> bool {
        self.config_hash == o.config_hash
            && self.n == o.n
            && self.trial == o.trial
            && self.eta.to_bits() == o.eta.to_bits()
            && self.risk_exact.to_bits() == o.risk_exact.to_bits()
            && self.risk_mc.map(f64::to_bits) == o.risk_mc.map(f64::to_bits)
            && self.wall_ms == o.wall_ms
            && self.seed == o.seed
    }
}

pub(crate) fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub(crate) fn parse_real(s: &str, column: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value `{s}` in column {column}")))
}

pub fn write_records<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_COLUMNS)?;
    for r in records {
        w.write_record([
            r.config_hash.clone(),
            r.n.to_string(),
            r.trial.to_string(),
            format_real(r.eta),
            format_real(r.risk_exact),
            r.risk_mc.map(format_real).unwrap_or_default(),
            r.wall_ms.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RUN_COLUMNS {
        return Err(Error::config(format!(
            "runs file header {header:?} does not match {RUN_COLUMNS:?}"
        )));
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in r.records() {
        let row = row?;
        let int = |i: usize| -> Result<u64> {
            row[i]
                .parse()
                .map_err(|_| Error::config(format!("bad value `{}` in column {}", &row[i], RUN_COLUMNS[i])))
        };
        let rec = RunRecord {
            config_hash: row[0].to_string(),
            n: int(1)? as usize,
            trial: int(2)? as usize,
            eta: parse_real(&row[3], "eta")?,
            risk_exact: parse_real(&row[4], "risk_exact")?,
            risk_mc: if row[5].is_empty() {
                None
            } else {
                Some(parse_real(&row[5], "risk_mc")?)
            },
            wall_ms: int(6)?,
            seed: int(7)?,
        };
        if !seen.insert((rec.config_hash.clone(), rec.n, rec.trial)) {
            return Err(Error::config(format!(
                "duplicate record for config {} n={} trial={}",
                rec.config_hash, rec.n, rec.trial
            )));
        }
        out.push(rec);
    }
    Ok(out)
}
