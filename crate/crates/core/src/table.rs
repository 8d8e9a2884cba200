//! Named embedding tables and their tab-separated on-disk form.
//!
//! Line 1 is `name\td0\t…\td{d-1}`; every following line is a primitive name
//! and `d` floats written with nine significant digits. Reading a file and
//! writing it back reproduces it byte for byte.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, SpaError};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    rows: Matrix,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, rows: Matrix) -> Result<Self> {
        if names.len() != rows.rows() {
            return Err(SpaError::DimensionMismatch(format!(
                "{} names for {} rows",
                names.len(),
                rows.rows()
            )));
        }
        if rows.cols() == 0 {
            return Err(SpaError::DimensionMismatch(
                "dimension must be positive".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (i, n) in names.iter().enumerate() {
            validate_name(n)?;
            if !seen.insert(n.as_str()) {
                return Err(SpaError::DuplicatePrimitive {
                    name: n.clone(),
                    line: i + 2,
                });
            }
        }
        Ok(Self { names, rows })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn into_matrix(self) -> Matrix {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("name");
        for j in 0..self.dim() {
            let _ = write!(out, "\td{j}");
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(self.rows.iter_rows()) {
            out.push_str(name);
            for v in row {
                out.push('\t');
                out.push_str(&format_value(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SpaError::MalformedHeader {
            line: 1,
            reason: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.first() != Some(&"name") {
            return Err(SpaError::MalformedHeader {
                line: 1,
                reason: "first column must be `name`".into(),
            });
        }
        let dim = cols.len() - 1;
        if dim == 0 {
            return Err(SpaError::MalformedHeader {
                line: 1,
                reason: "no dimension columns".into(),
            });
        }
        for (j, c) in cols[1..].iter().enumerate() {
            if *c != format!("d{j}") {
                return Err(SpaError::MalformedHeader {
                    line: 1,
                    reason: format!("expected column d{j}, found {c:?}"),
                });
            }
        }

        let mut names = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut fields = line.split('\t');
            let name = fields.next().unwrap_or_default();
            validate_name(name)?;
            let values: Vec<&str> = fields.collect();
            if values.len() != dim {
                return Err(SpaError::RaggedRow {
                    line: lineno,
                    expected: dim,
                    found: values.len(),
                });
            }
            if !seen.insert(name.to_string()) {
                return Err(SpaError::DuplicatePrimitive {
                    name: name.to_string(),
                    line: lineno,
                });
            }
            for tok in values {
                data.push(parse_value(tok, lineno)?);
            }
            names.push(name.to_string());
        }
        let rows = Matrix::from_vec(names.len(), dim, data);
        Ok(Self { names, rows })
    }
}

pub fn save_table(table: &EmbeddingTable, destination: &Path) -> Result<()> {
    fs::write(destination, table.to_tsv()).map_err(|e| SpaError::io(destination, e))
}

pub fn load_table(source: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(source).map_err(|e| SpaError::io(source, e))?;
    EmbeddingTable::from_tsv(&text)
}

/// Nine significant digits in scientific notation, e.g. `-1.23456789e-1`.
pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

pub(crate) fn parse_value(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| SpaError::InvalidNumber {
            line,
            token: tok.to_string(),
        })
}

pub(crate) fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(SpaError::EmptyName);
    }
    if name.chars().any(|c| c.is_whitespace()) {
        return Err(SpaError::InvalidVocabulary(format!(
            "primitive name {name:?} contains whitespace"
        )));
    }
    Ok(())
}
