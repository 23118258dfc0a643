use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Precomputed descriptor vectors for one cloud, keyed by point index.
///
/// Text layout: a header line `<descriptor_id> <dimension>`, then one line per
/// keypoint: the point index followed by `dimension` values. Blank lines and
/// lines starting with `#` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalDescriptor {
    id: String,
    dim: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl ExternalDescriptor {
    pub fn new(id: impl Into<String>, dim: usize) -> Self {
        Self {
            id: id.into(),
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, index: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Shape(format!(
                "descriptor `{}` expects {} values, got {}",
                self.id,
                self.dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "descriptor `{}` row {index} has non-finite values",
                self.id
            )));
        }
        self.rows.insert(index, values);
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.rows.get(&index).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            location: format!("line {line}"),
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hl, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let mut fields = header.split_whitespace();
        let id = fields
            .next()
            .ok_or_else(|| parse_err(hl, "missing descriptor id".into()))?;
        let dim: usize = fields
            .next()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| parse_err(hl, "missing or invalid dimension".into()))?;
        if dim == 0 {
            return Err(parse_err(hl, "dimension must be positive".into()));
        }
        let mut table = ExternalDescriptor::new(id, dim);
        for (ln, line) in lines {
            let mut fields = line.split_whitespace();
            let index: usize = fields
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(ln, "invalid point index".into()))?;
            let values = fields
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(ln, e.to_string()))?;
            if values.len() != dim {
                return Err(parse_err(
                    ln,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            if table.rows.contains_key(&index) {
                return Err(parse_err(ln, format!("duplicate row for point {index}")));
            }
            table.insert(index, values).map_err(|e| parse_err(ln, e.to_string()))?;
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.id, self.dim);
        for (index, values) in &self.rows {
            let _ = write!(out, "{index}");
            for v in values {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }
}
