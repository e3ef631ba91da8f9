//! Invariant counting sweeps and the `counts.csv` / `basis.csv` files.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::records::{format_real, parse_real};
use crate::actions::GroupActionSpec;
use crate::error::{Error, Result};
use crate::spectra::EigenBasis;

pub const COUNT_COLUMNS: [&str; 4] = ["lambda", "count", "prediction", "ratio"];
pub const BASIS_COLUMNS: [&str; 4] = ["index", "lambda", "kind", "k_or_lm"];

/// One row of `counts.csv`. `prediction` and `ratio` are empty when the
/// quotient has no closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub lambda: f64,
    pub count: u64,
    pub prediction: Option<f64>,
    pub ratio: Option<f64>,
}

/// Parses `start:stop:factor` into `start, start·factor, ...` up to `stop`,
/// snapping to `stop` when within a relative `1e-9`.
pub fn geometric_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::config(format!("bad grid `{spec}` (expected start:stop:factor)"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let (start, stop, factor) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if !(start > 0.0 && stop >= start && factor > 1.0 && stop.is_finite()) {
        return Err(Error::config(format!(
            "grid `{spec}` needs 0 < start <= stop and factor > 1"
        )));
    }
    let mut out = Vec::new();
    let mut k = 0;
    loop {
        let mut v = start * factor.powi(k);
        if ((v - stop) / stop).abs() <= 1e-9 {
            v = stop;
        } else if v > stop {
            break;
        }
        out.push(v);
        k += 1;
    }
    Ok(out)
}

pub fn count_sweep(action: &GroupActionSpec, lambdas: &[f64]) -> Result<Vec<CountRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let c = action.count_invariant(lambda)?;
            Ok(CountRow {
                lambda,
                count: c.count,
                prediction: c.prediction,
                ratio: c.ratio(),
            })
        })
        .collect()
}

pub fn write_counts<W: Write>(out: W, rows: &[CountRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COUNT_COLUMNS)?;
    for r in rows {
        w.write_record([
            format_real(r.lambda),
            r.count.to_string(),
            r.prediction.map(format_real).unwrap_or_default(),
            r.ratio.map(format_real).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_counts<R: Read>(input: R) -> Result<Vec<CountRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COUNT_COLUMNS {
        return Err(Error::config(format!(
            "counts file header {header:?} does not match {COUNT_COLUMNS:?}"
        )));
    }
    let opt = |s: &str, c: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse_real(s, c).map(Some)
        }
    };
    r.records()
        .map(|row| {
            let row = row?;
            Ok(CountRow {
                lambda: parse_real(&row[0], "lambda")?,
                count: row[1]
                    .parse()
                    .map_err(|_| Error::config(format!("bad count `{}`", &row[1])))?,
                prediction: opt(&row[2], "prediction")?,
                ratio: opt(&row[3], "ratio")?,
            })
        })
        .collect()
}

/// `basis.csv`: one row per basis entry; `k_or_lm` is space separated.
pub fn write_basis<W: Write>(out: W, basis: &EigenBasis) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BASIS_COLUMNS)?;
    for (i, e) in basis.entries().iter().enumerate() {
        w.write_record([
            i.to_string(),
            e.lambda.to_string(),
            e.kind_tag().to_string(),
            e.k_or_lm(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
