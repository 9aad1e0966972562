use std::fmt;

use crate::error::{Error, Result};

/// Binary attention mask: `allowed(i, j)` says whether query `i` may attend to key `j`.
///
/// Every query row has at least one allowed key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Mask::from_bits(rows, cols, bits)
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                bits.len()
            )));
        }
        let mask = Mask { rows, cols, bits };
        if let Some(i) = (0..rows).find(|&i| !(0..cols).any(|j| mask.allowed(i, j))) {
            return Err(Error::InvalidMask(format!("query row {i} masks every key")));
        }
        Ok(mask)
    }

    /// Builds a mask from 0/1 rows.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged mask rows".into()));
        }
        let bits = rows.iter().flatten().map(|&b| b != 0).collect();
        Mask::from_bits(n, cols, bits)
    }

    pub fn ones(n: usize) -> Self {
        Mask {
            rows: n,
            cols: n,
            bits: vec![true; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Mask::from_fn(n, n, |i, j| i == j).expect("identity rows are never empty")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    /// Keys that no query may attend to.
    pub fn dead_columns(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&j| (0..self.rows).all(|i| !self.allowed(i, j)))
            .collect()
    }
}

impl fmt::Display for Mask {
    /// One line per query, `1`/`0` per key separated by spaces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let line: Vec<&str> = (0..self.cols)
                .map(|j| if self.allowed(i, j) { "1" } else { "0" })
                .collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}
