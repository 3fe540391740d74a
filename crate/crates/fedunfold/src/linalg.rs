//! Dense row-major matrices over f64.
//!
//! Everything the simulator touches is two-dimensional: scalars are 1x1,
//! column vectors are nx1, row vectors are 1xn. The only broadcasting rule
//! is the row-wise bias add in [`add`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "array data length mismatch");
        Array { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(x: f64) -> Self {
        Array { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn col_vec(data: Vec<f64>) -> Self {
        Array { rows: data.len(), cols: 1, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Array { rows: 1, cols: data.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Array> {
        if rows * cols != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {}x{} into {}x{}",
                self.rows, self.cols, rows, cols
            )));
        }
        Ok(Array { rows, cols, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += scale * other`, shapes must match exactly.
    pub fn axpy(&mut self, scale: f64, other: &Array) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

fn shape_err(op: &str, a: &Array, b: &Array) -> Error {
    Error::Shape(format!(
        "{op}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Array::from_vec(m, n, out))
}

pub fn transpose(a: &Array) -> Array {
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    Array::from_vec(a.cols, a.rows, out)
}

/// Elementwise add; a 1xC right operand broadcasts over the rows of an NxC
/// left operand (bias add). No other broadcasting.
pub fn add(a: &Array, b: &Array) -> Result<Array> {
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Ok(Array::from_vec(a.rows, a.cols, data));
    }
    if b.rows == 1 && b.cols == a.cols && a.rows > 1 {
        let mut out = a.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                out.data[r * a.cols + c] += b.data[c];
            }
        }
        return Ok(out);
    }
    Err(shape_err("add", a, b))
}

pub fn sub(a: &Array, b: &Array) -> Result<Array> {
    if a.shape() != b.shape() {
        return Err(shape_err("sub", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Array::from_vec(a.rows, a.cols, data))
}

pub fn mul(a: &Array, b: &Array) -> Result<Array> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Array::from_vec(a.rows, a.cols, data))
}

pub fn scale(a: &Array, factor: f64) -> Array {
    a.map(|v| v * factor)
}

pub fn relu(a: &Array) -> Array {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Indicator of the positive part; the subgradient of relu at 0 is taken as 0.
pub fn relu_mask(a: &Array) -> Array {
    a.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Column sums as a 1xC row.
pub fn colsum(a: &Array) -> Array {
    let mut out = vec![0.0; a.cols];
    for row in a.data.chunks(a.cols) {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Array::row_vec(out)
}

pub fn sum(a: &Array) -> f64 {
    a.data.iter().sum()
}

pub fn mean(a: &Array) -> f64 {
    sum(a) / a.data.len() as f64
}

/// Mean over every entry of the squared difference.
pub fn mse(pred: &Array, target: &Array) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err("mse", pred, target));
    }
    let n = pred.data.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Row-wise softmax with max subtraction. When `mask` is given, masked-out
/// columns get probability zero and the rest renormalize among themselves.
pub fn softmax_rows(a: &Array, mask: Option<&[bool]>) -> Result<Array> {
    if let Some(m) = mask {
        if m.len() != a.cols {
            return Err(Error::Shape(format!(
                "softmax mask length {} vs {} columns",
                m.len(),
                a.cols
            )));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Config("softmax mask excludes every column".into()));
        }
    }
    let keep = |c: usize| mask.is_none_or(|m| m[c]);
    let mut out = Array::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..a.cols {
            if keep(c) {
                mx = mx.max(a.get(r, c));
            }
        }
        let mut denom = 0.0;
        for c in 0..a.cols {
            if keep(c) {
                let e = (a.get(r, c) - mx).exp();
                out.set(r, c, e);
                denom += e;
            }
        }
        for c in 0..a.cols {
            if keep(c) {
                out.set(r, c, out.get(r, c) / denom);
            }
        }
    }
    Ok(out)
}
