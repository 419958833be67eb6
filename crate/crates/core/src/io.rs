//! CSV and JSON helpers shared by the dataset, model and diagnostics writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Shortest decimal string that parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn indexed_headers(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}

/// Writes the column blocks side by side under a single header row.
pub fn write_blocks<W: Write>(w: W, blocks: &[(&str, &Matrix)]) -> Result<()> {
    let rows = blocks.first().map_or(0, |(_, m)| m.rows());
    for (name, m) in blocks {
        if m.rows() != rows {
            return Err(Error::dims(rows, m.rows(), format!("CSV block {name}")));
        }
    }
    let mut wtr = csv::Writer::from_writer(w);
    let header: Vec<String> = blocks
        .iter()
        .flat_map(|(name, m)| indexed_headers(name, m.cols()))
        .collect();
    wtr.write_record(&header)?;
    for i in 0..rows {
        let rec: Vec<String> = blocks
            .iter()
            .flat_map(|(_, m)| m.row(i).iter().map(|&v| fmt_f64(v)))
            .collect();
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_blocks_file(path: &Path, blocks: &[(&str, &Matrix)]) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_blocks(f, blocks)
}

/// Parsed CSV: header names and a numeric matrix of all records.
pub struct Table {
    pub header: Vec<String>,
    pub data: Matrix,
}

impl Table {
    /// Columns whose header is `{prefix}_{i}`, in index order.
    pub fn block(&self, prefix: &str) -> Result<Matrix> {
        let mut idx = Vec::new();
        for i in 0.. {
            let name = format!("{prefix}_{i}");
            match self.header.iter().position(|h| *h == name) {
                Some(p) => idx.push(p),
                None => break,
            }
        }
        let mut out = Matrix::zeros(self.data.rows(), idx.len());
        for r in 0..self.data.rows() {
            for (c, &p) in idx.iter().enumerate() {
                out.set(r, c, self.data.get(r, p));
            }
        }
        Ok(out)
    }

    pub fn has_block(&self, prefix: &str) -> bool {
        self.header.iter().any(|h| *h == format!("{prefix}_0"))
    }
}

pub fn read_table<R: std::io::Read>(r: R) -> Result<Table> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut data = Matrix::zeros(0, header.len());
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad number {s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        data.push_row(&row)?;
    }
    Ok(Table { header, data })
}

pub fn read_table_file(path: &Path) -> Result<Table> {
    read_table(File::open(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_blocks_round_trip_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6)) {
            let a = Matrix::from_vec(3, 1, vals[..3].to_vec()).unwrap();
            let b = Matrix::from_vec(3, 1, vals[3..].to_vec()).unwrap();
            let mut buf = Vec::new();
            write_blocks(&mut buf, &[("theta", &a), ("y", &b)]).unwrap();
            let t = read_table(&buf[..]).unwrap();
            prop_assert_eq!(t.block("theta").unwrap(), a);
            prop_assert_eq!(t.block("y").unwrap(), b);
        }
    }
}
