//! Small dense vector and matrix helpers. Everything is `f64` and row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

pub fn check_dim(v: &[f64], expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            found: v.len(),
        })
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn is_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// `x + y` element-wise.
pub fn add(x: &[f64], y: &[f64]) -> Vector {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

pub fn sub(x: &[f64], y: &[f64]) -> Vector {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

pub fn scale(x: &[f64], s: f64) -> Vector {
    x.iter().map(|a| a * s).collect()
}

/// `acc += s * x`
pub fn axpy(acc: &mut [f64], s: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += s * b;
    }
}

/// Unit-length copy of `x`, or `None` when `x` is the zero vector.
pub fn normalized(x: &[f64]) -> Option<Vector> {
    let n = norm(x);
    (n > 0.0).then(|| scale(x, 1.0 / n))
}

/// Cosine similarity. Rejects zero vectors and length mismatches; the
/// result is clamped into `[-1, 1]` to absorb rounding.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(y, x.len())?;
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vector {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vector = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(z)` without overflow.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(r, cols)?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vector {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vector {
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate().take(self.rows) {
            axpy(&mut out, *yr, self.row(r));
        }
        out
    }

    /// `self += s · u vᵀ`
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        for (r, ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            axpy(row, s * ur, v);
        }
    }

    pub fn is_finite(&self) -> bool {
        is_finite(&self.data)
    }
}
