//! Binary numeric tables with a small plain-text header.
//!
//! ```text
//! ETKPF-TABLE 1
//! rows=<r>
//! cols=<c>
//! <key>=<value>      (any number of metadata lines)
//! end
//! <r·c little-endian f64, row-major>
//! ```

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};

const MAGIC: &str = "ETKPF-TABLE 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    /// Metadata in file order. Keys must not contain `=` or newlines.
    pub meta: Vec<(String, String)>,
    pub data: Vec<f64>,
}

impl Table {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "table {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            meta: Vec::new(),
            data,
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC}\nrows={}\ncols={}\n", self.rows, self.cols);
        for (k, v) in &self.meta {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::invalid(format!("bad table metadata key {k:?}")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io_err)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut std::io::BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line).map_err(io_err)? == 0 {
                return Err(Error::invalid("table header truncated"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(Error::invalid("not a table file"));
        }
        let mut rows = None;
        let mut cols = None;
        let mut meta = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad table header line {l:?}")))?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad table size {v:?}")))
            };
            match k {
                "rows" => rows = Some(parse(v)?),
                "cols" => cols = Some(parse(v)?),
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        let (rows, cols) = rows
            .zip(cols)
            .ok_or_else(|| Error::invalid("table header lacks rows/cols"))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io_err)?;
        if bytes.len() != rows * cols * 8 {
            return Err(Error::invalid(format!(
                "table payload has {} bytes, expected {}",
                bytes.len(),
                rows * cols * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            rows,
            cols,
            meta,
            data,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(io_err)?;
        Self::read_from(f)
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

/// Comma-separated list in shortest round-trip form.
pub fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number {t:?}")))
        })
        .collect()
}

pub fn split_usize(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad index {t:?}")))
        })
        .collect()
}
