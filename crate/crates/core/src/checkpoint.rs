//! Plain-text checkpoint container shared by model and editor state dumps.
//!
//! ```text
//! @section <name>
//! key=value
//! @matrix <name> <rows> <cols>
//! <rows lines of comma-separated values>
//! @end
//! ```
//!
//! Reals are written in shortest round-trip scientific notation, so a dump
//! followed by a load reproduces every value bit for bit.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{parse_csv_row, Matrix};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    fields: Vec<(String, String)>,
    matrices: Vec<(String, Matrix)>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn set_f64(&mut self, key: &str, value: f64) -> &mut Self {
        self.fields.push((key.to_string(), format!("{value:e}")));
        self
    }

    pub fn push_matrix(&mut self, name: &str, m: Matrix) -> &mut Self {
        self.matrices.push((name.to_string(), m));
        self
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("section {}: missing field {key}", self.name)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("section {}: bad value {raw:?} for {key}", self.name)))
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Parse(format!("section {}: missing matrix {name}", self.name)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Parse(format!("missing section {name}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for sec in &self.sections {
            out.push_str(&format!("@section {}\n", sec.name));
            for (k, v) in &sec.fields {
                out.push_str(&format!("{k}={v}\n"));
            }
            for (name, m) in &sec.matrices {
                out.push_str(&format!("@matrix {name} {} {}\n", m.rows(), m.cols()));
                out.push_str(&m.to_csv());
            }
            out.push_str("@end\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let mut sections = Vec::new();
        let mut current: Option<Section> = None;
        let mut lines = text.lines().enumerate();
        while let Some((lineno, line)) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix("@section ") {
                if current.is_some() {
                    return Err(err("nested @section"));
                }
                current = Some(Section::new(name.trim()));
            } else if line == "@end" {
                sections.push(current.take().ok_or_else(|| err("@end without @section"))?);
            } else if let Some(spec) = line.strip_prefix("@matrix ") {
                let sec = current.as_mut().ok_or_else(|| err("@matrix outside section"))?;
                let parts: Vec<&str> = spec.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(err("expected @matrix <name> <rows> <cols>"));
                }
                let rows: usize = parts[1].parse().map_err(|_| err("bad row count"))?;
                let cols: usize = parts[2].parse().map_err(|_| err("bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (_, row) = lines.next().ok_or_else(|| err("truncated matrix"))?;
                    let values = parse_csv_row(row)?;
                    if values.len() != cols {
                        return Err(err("matrix row has wrong length"));
                    }
                    data.extend(values);
                }
                sec.matrices
                    .push((parts[0].to_string(), Matrix::from_vec(rows, cols, data)?));
            } else if let Some((k, v)) = line.split_once('=') {
                let sec = current.as_mut().ok_or_else(|| err("field outside section"))?;
                sec.fields.push((k.trim().to_string(), v.trim().to_string()));
            } else {
                return Err(err("unrecognized line"));
            }
        }
        if current.is_some() {
            return Err(Error::Parse("unterminated section".into()));
        }
        Ok(Checkpoint { sections })
    }
}
