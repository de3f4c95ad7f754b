//! Small dense row-major matrices used by the contrastive head and the
//! correspondence supervision.

use serde::{Deserialize, Serialize};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self -= lr * grad`, elementwise.
    pub fn descend(&mut self, grad: &Matrix, lr: f64) {
        assert_eq!((self.rows, self.cols), (grad.rows, grad.cols));
        for (p, g) in self.data.iter_mut().zip(&grad.data) {
            *p -= lr * g;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense 0/1 matrix, one byte per entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

/// Magic prefix of the dense binary matrix export.
pub const BINARY_MATRIX_MAGIC: [u8; 8] = *b"OTAMAT01";

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = u8::from(v);
    }

    pub fn row_sum(&self, r: usize) -> usize {
        self.data[r * self.cols..(r + 1) * self.cols]
            .iter()
            .map(|&v| usize::from(v))
            .sum()
    }

    pub fn col_sum(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c)).count()
    }

    /// Boolean product `step(self · rhs)`: entry is 1 iff some k has
    /// `self[i,k] = rhs[k,j] = 1`.
    pub fn bool_product(&self, rhs: &BinaryMatrix) -> BinaryMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimension mismatch");
        let mut out = BinaryMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if !self.get(i, k) {
                    continue;
                }
                for j in 0..rhs.cols {
                    if rhs.get(k, j) {
                        out.set(i, j, true);
                    }
                }
            }
        }
        out
    }

    /// Row-major 8-bit export with a 16-byte header: 8-byte magic,
    /// then rows and cols as little-endian `u32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len());
        out.extend_from_slice(&BINARY_MATRIX_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 16 || bytes[..8] != BINARY_MATRIX_MAGIC {
            return None;
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().ok()?) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().ok()?) as usize;
        let body = &bytes[16..];
        if body.len() != rows * cols || body.iter().any(|&b| b > 1) {
            return None;
        }
        Some(Self {
            rows,
            cols,
            data: body.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bool_product_small() {
        let mut a = BinaryMatrix::zeros(2, 2);
        a.set(0, 1, true);
        let mut b = BinaryMatrix::zeros(2, 3);
        b.set(1, 0, true);
        b.set(1, 2, true);
        let p = a.bool_product(&b);
        assert!(p.get(0, 0) && p.get(0, 2) && !p.get(0, 1));
        assert_eq!(p.row_sum(1), 0);
    }

    #[test]
    fn binary_export_header() {
        let mut m = BinaryMatrix::zeros(2, 3);
        m.set(1, 2, true);
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 16 + 6);
        assert_eq!(&bytes[..8], b"OTAMAT01");
        assert_eq!(bytes[8..12], 2u32.to_le_bytes());
        assert_eq!(bytes[12..16], 3u32.to_le_bytes());
        assert_eq!(BinaryMatrix::from_bytes(&bytes), Some(m));
        assert_eq!(BinaryMatrix::from_bytes(&bytes[..10]), None);
    }
}
