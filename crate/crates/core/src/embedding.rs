//! Learned node embeddings and their tab-separated text form.
//!
//! One line per node, no header: the node id followed by `d` values, each
//! printed with 12 significant digits in C `%.12g` style.

use std::io::{BufRead, BufReader, Read, Write};

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// `|V| x d` latent codes, row-aligned with node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("embedding contains non-finite values"));
        }
        Ok(EmbeddingMatrix { values })
    }

    pub fn node_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, node: usize) -> ArrayView1<'_, f64> {
        self.values.row(node)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn write_tsv<W: Write>(&self, ids: &[String], mut out: W) -> Result<()> {
        if ids.len() != self.node_count() {
            return Err(Error::argument(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                self.node_count()
            )));
        }
        let mut line = String::new();
        for (id, row) in ids.iter().zip(self.values.rows()) {
            line.clear();
            line.push_str(id);
            for &v in row {
                line.push('\t');
                line.push_str(&format_g12(v));
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads ids and rows; every row must have the same width.
    pub fn read_tsv<R: Read>(source: R) -> Result<(Vec<String>, EmbeddingMatrix)> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut width = None;
        for (i, line) in BufReader::new(source).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_string();
            let start = data.len();
            for f in fields {
                let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("invalid number {f:?}"),
                })?;
                data.push(v);
            }
            let w = data.len() - start;
            if w == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: "row has no values".into(),
                });
            }
            match width {
                None => width = Some(w),
                Some(expected) if expected != w => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("expected {expected} values, found {w}"),
                    })
                }
                _ => {}
            }
            ids.push(id);
        }
        let width = width.ok_or(Error::EmptyGraph)?;
        let values = Array2::from_shape_vec((ids.len(), width), data).expect("widths checked");
        Ok((ids, EmbeddingMatrix::new(values)?))
    }
}

/// `printf("%.12g", v)`
pub fn format_g12(v: f64) -> String {
    const PRECISION: i32 = 12;
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PRECISION).contains(&exp) {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
