//! Dense row-major `f32` tensors and the handful of kernels the transformer
//! forward pass needs.
//!
//! Every reduction accumulates in `f64` in a fixed left-to-right order and
//! rounds once, so results are bitwise reproducible across runs and thread
//! counts.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => panic!("expected a 2-D tensor, got shape {:?}", self.shape),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Keeps the listed rows, in the listed order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    /// Keeps the listed columns, in the listed order.
    pub fn select_cols(&self, cols: &[usize]) -> Tensor {
        let r = self.rows();
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = self.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Tensor {
            shape: vec![r, cols.len()],
            data,
        }
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    let out = Tensor {
        shape: vec![m, n],
        data: out,
    };
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`, for weights stored output-major.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (n, k2) = b.dims2();
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_transposed inner dims differ: {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(arow, &b.data[j * k..(j + 1) * k]) as f32);
        }
    }
    let out = Tensor {
        shape: vec![m, n],
        data: out,
    };
    out.ensure_finite("matmul_transposed")?;
    Ok(out)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |s, (&x, &y)| s + x as f64 * y as f64)
}

/// Max-subtracted softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = *x.shape.last().unwrap_or(&0);
    if cols > 0 {
        out.data.chunks_mut(cols).for_each(softmax_in_place);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = ((v - max) as f64).exp();
            sum += e;
            e
        })
        .collect();
    for (r, e) in row.iter_mut().zip(exps) {
        *r = (e / sum) as f32;
    }
}

/// `x / sqrt(mean(x²) + eps) ⊙ weight`.
pub fn rms_norm(x: &[f32], weight: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != weight.len() {
        return Err(Error::Shape(format!(
            "rms_norm: input has {} values, weight has {}",
            x.len(),
            weight.len()
        )));
    }
    let mean_sq = x.iter().fold(0.0f64, |s, &v| s + v as f64 * v as f64) / x.len().max(1) as f64;
    let inv = 1.0 / (mean_sq + eps as f64).sqrt();
    Ok(x.iter()
        .zip(weight)
        .map(|(&v, &w)| (v as f64 * inv * w as f64) as f32)
        .collect())
}

/// Row-wise [`rms_norm`] of a `T×d` tensor.
pub fn rms_norm_rows(x: &Tensor, weight: &[f32], eps: f32) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        data.extend(rms_norm(x.row(i), weight, eps)?);
    }
    let out = Tensor {
        shape: x.shape.clone(),
        data,
    };
    out.ensure_finite("rms_norm")?;
    Ok(out)
}

pub fn silu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

pub fn silu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| silu_scalar(v)).collect(),
    }
}

/// Rotates each `(2i, 2i+1)` pair of every row by `position · theta^(-2i/head_dim)`.
pub fn rope_apply(x: &Tensor, theta: f32, positions: &[usize]) -> Result<Tensor> {
    let (t, head_dim) = x.dims2();
    if head_dim % 2 != 0 {
        return Err(Error::Shape(format!(
            "rope needs an even head_dim, got {head_dim}"
        )));
    }
    if positions.len() != t {
        return Err(Error::Shape(format!(
            "rope: {} positions for {t} rows",
            positions.len()
        )));
    }
    let mut out = x.clone();
    for (row, &pos) in positions.iter().enumerate() {
        let r = out.row_mut(row);
        for i in 0..head_dim / 2 {
            let freq = (theta as f64).powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let a = r[2 * i] as f64;
            let b = r[2 * i + 1] as f64;
            r[2 * i] = (a * cos - b * sin) as f32;
            r[2 * i + 1] = (a * sin + b * cos) as f32;
        }
    }
    Ok(out)
}
