//! Dense row-major matrices and the seeded random source.
//!
//! Every public operation validates shapes and rejects non-finite results, so
//! a NaN never travels silently from one kernel into the next.
//!
//! # Random numbers
//!
//! [`Rng`] is ChaCha8 (the `rand_chacha` stream cipher generator) seeded via
//! `SeedableRng::seed_from_u64`. Independent streams for the same seed are
//! selected with the ChaCha stream id (see [`Rng::stream`]). Uniform doubles
//! take the top 53 bits of a `u64` draw; normals use the basic Box–Muller
//! transform, consuming two uniforms per pair and returning the cosine branch
//! first, then the cached sine branch. This algorithm is part of the
//! reproducibility contract and must not change.

use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        ensure_finite(&data, "from_vec")?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: (rows.len(), cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Builds a matrix entry by entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the raw storage. Callers are responsible for keeping
    /// entries finite; [`Matrix::check_finite`] re-validates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        ensure_finite(&self.data, op)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape(),
                rhs: (start, end),
            });
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Shape {
                op: "select_cols",
                lhs: self.shape(),
                rhs: (0, bad),
            });
        }
        let mut out = Matrix::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (d, &c) in dst.iter_mut().zip(cols) {
                *d = src[c];
            }
        }
        Ok(out)
    }

    /// Overwrites rows `[start, start + src.rows())` with `src`.
    pub fn write_rows(&mut self, start: usize, src: &Matrix) -> Result<()> {
        if src.cols != self.cols || start + src.rows > self.rows {
            return Err(Error::Shape {
                op: "write_rows",
                lhs: self.shape(),
                rhs: src.shape(),
            });
        }
        self.data[start * self.cols..(start + src.rows) * self.cols].copy_from_slice(&src.data);
        Ok(())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        self.check_finite("add_assign")
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        self.check_finite("axpy")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        out.check_finite("map")?;
        Ok(out)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        };
        out.check_finite("hadamard")?;
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over columns, giving a `rows × 1` matrix.
    pub fn row_sums(&self) -> Matrix {
        let data = (0..self.rows).map(|i| self.row(i).iter().sum()).collect();
        Matrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    // i-k-j order walks both `b` and `out` contiguously.
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    let out = Matrix {
        rows: n,
        cols: m,
        data: out,
    };
    out.check_finite("matmul")?;
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    let out = Matrix {
        rows: n,
        cols: m,
        data: out,
    };
    out.check_finite("matmul_tn")?;
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            out[i * m + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    let out = Matrix {
        rows: n,
        cols: m,
        data: out,
    };
    out.check_finite("matmul_nt")?;
    Ok(out)
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = a.clone();
    out.add_assign(b).map_err(|e| match e {
        Error::Shape { lhs, rhs, .. } => Error::Shape { op: "add", lhs, rhs },
        other => other,
    })?;
    Ok(out)
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.same_shape(b, "sub")?;
    let out = Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    };
    out.check_finite("sub")?;
    Ok(out)
}

pub fn scale(a: &Matrix, s: f64) -> Result<Matrix> {
    a.map(|v| v * s)
}

pub fn negate(a: &Matrix) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|v| -v).collect(),
    }
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Elementwise `|a - b| <= atol + rtol * |b|`.
pub fn allclose(a: &Matrix, b: &Matrix, rtol: f64, atol: f64) -> Result<bool> {
    a.same_shape(b, "allclose")?;
    Ok(a
        .data
        .iter()
        .zip(&b.data)
        .all(|(x, y)| (x - y).abs() <= atol + rtol * y.abs()))
}

/// Seeded, reproducible random source. See the module docs for the exact
/// algorithm.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// An independent stream derived from `seed`. Stream 0 equals `Rng::new(seed)`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the tiny bias is irrelevant at these sizes.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. `N(0, std²)` entries, filled row-major.
pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("gaussian std must be positive, got {std}")));
    }
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Payload precision tag in the tensor wire format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

/// Writes `(rows: u32, cols: u32, dtype: u8)` little-endian followed by the
/// row-major payload.
pub fn write_tensor<W: Write>(w: &mut W, m: &Matrix, dtype: Dtype) -> Result<()> {
    let rows = u32::try_from(m.rows).map_err(|_| Error::Input("tensor too large".into()))?;
    let cols = u32::try_from(m.cols).map_err(|_| Error::Input("tensor too large".into()))?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    w.write_all(&[dtype as u8])?;
    match dtype {
        Dtype::F64 => {
            for v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in &m.data {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Matrix, Dtype)> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Checkpoint("tensor dims overflow".into()))?;
    let (dtype, data) = match tag[0] {
        0 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            (Dtype::F32, data)
        }
        1 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (Dtype::F64, data)
        }
        t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
    };
    let m = Matrix::from_vec(rows, cols, data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor payload: {e}")))?;
    Ok((m, dtype))
}
