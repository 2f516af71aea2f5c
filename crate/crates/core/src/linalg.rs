//! Dense row-major matrices and the deterministic multiply/accumulate
//! primitives the rest of the crate computes with.
//!
//! Every reduction runs in ascending index order, so results are
//! bit-reproducible across runs and across any worker configuration.
//! In-place accumulation additionally carries a compensation channel
//! (classic two-sum error tracking) so that adding a product and later
//! subtracting the identical product restores the target bit-exactly —
//! plain `+=`/`-=` cannot guarantee that in floating point, and the
//! merge/unmerge machinery upstream depends on it.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matmul shape mismatch: {0}x{1} * {2}x{3}")]
    MulShape(usize, usize, usize, usize),
    #[error("accumulate target is {target_rows}x{target_cols}, product is {rows}x{cols}")]
    AccumulateShape {
        target_rows: usize,
        target_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("elementwise op on mismatched shapes {0}x{1} vs {2}x{3}")]
    ElementwiseShape(usize, usize, usize, usize),
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("concat part {index}: {msg}")]
    ConcatPart { index: usize, msg: String },
}

/// Sign of an in-place accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Dense row-major matrix of f64 elements.
///
/// Zero-sized dimensions are permitted (an empty rank concatenation is a
/// legitimate value); model tensors validate positivity at the config level.
///
/// The optional `residue` buffer is internal accumulation state: it holds the
/// exact rounding error of every in-place [`accumulate`] applied so far, so
/// that a later accumulation of the same product with the opposite sign
/// cancels bit-exactly. `data` always holds the ordinary rounded f64 value;
/// reads (`matmul`, serialization, comparisons) never see the residue.
#[derive(Debug, Clone)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    residue: Option<Vec<f64>>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            residue: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            residue: None,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
            residue: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Direct element write. Drops the accumulation residue: externally
    /// written values start a fresh accumulation history.
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.residue = None;
        self.data[r * self.cols + c] = v;
    }

    /// Mutable access to raw storage. Drops the accumulation residue.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.residue = None;
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
            residue: None,
        }
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        self.map(|v| c * v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and element payload (residue excluded).
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Value and residue channels for compensated accumulation, allocating
    /// the residue on first use.
    pub(crate) fn acc_channels(&mut self) -> (&mut [f64], &mut [f64]) {
        if self.residue.is_none() {
            self.residue = Some(vec![0.0; self.data.len()]);
        }
        (self.data.as_mut_slice(), self.residue.as_mut().unwrap())
    }
}

/// Exact sum decomposition: returns `(s, e)` with `s = fl(a + b)` and
/// `s + e == a + b` exactly (Knuth two-sum).
#[inline]
pub(crate) fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    // Requires |a| >= |b|.
    let s = a + b;
    let e = b - (s - a);
    (s, e)
}

/// Compensated in-place add of `p` into the `(hi, lo)` pair.
///
/// `hi` stays the ordinary rounded value `fl(hi_old + p)` whenever `lo` was
/// zero beforehand, and `hi + lo` tracks the exact running sum, so adding `p`
/// and later adding `-p` restores both channels bit-exactly.
#[inline]
pub(crate) fn comp_add(hi: &mut f64, lo: &mut f64, p: f64) {
    let (s, e) = two_sum(*hi, p);
    let t = e + *lo;
    let (h, l) = if s.abs() >= t.abs() {
        fast_two_sum(s, t)
    } else {
        fast_two_sum(t, s)
    };
    *hi = h;
    *lo = l;
}

/// `a * b` with the fixed ascending-k reduction order per output element.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::MulShape(a.rows, a.cols, b.rows, b.cols));
    }
    let (m, p, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    // i-k-j loop: per output element the k-reduction is still ascending, and
    // the inner j loop runs over contiguous rows.
    for i in 0..m {
        let c_row = &mut out.data[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a.data[i * p + k];
            let b_row = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                c_row[j] += aik * b_row[j];
            }
        }
    }
    Ok(out)
}

/// `target += sign * (a * b)`, in place, with compensated accumulation.
///
/// The product is computed first (same reduction order as [`matmul`], so its
/// elements are bit-identical to `matmul(a, b)`), then folded into the target
/// through the residue channel. Accumulating a product and then the same
/// product with the opposite sign leaves the target bit-identical to its
/// prior value.
pub fn accumulate(
    target: &mut Matrix,
    a: &Matrix,
    b: &Matrix,
    sign: Sign,
) -> Result<(), LinalgError> {
    let product = matmul(a, b)?;
    if product.rows != target.rows || product.cols != target.cols {
        return Err(LinalgError::AccumulateShape {
            target_rows: target.rows,
            target_cols: target.cols,
            rows: product.rows,
            cols: product.cols,
        });
    }
    let f = sign.factor();
    let (hi, lo) = target.acc_channels();
    for (idx, p) in product.data.iter().enumerate() {
        comp_add(&mut hi[idx], &mut lo[idx], f * p);
    }
    Ok(())
}

/// Elementwise sum.
pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(LinalgError::ElementwiseShape(a.rows, a.cols, b.rows, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, a.cols);
    for (o, (x, y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
        *o = x + y;
    }
    Ok(out)
}

/// Elementwise product.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(LinalgError::ElementwiseShape(a.rows, a.cols, b.rows, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, a.cols);
    for (o, (x, y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
        *o = x * y;
    }
    Ok(out)
}

/// Stacks low-rank factor pairs along the rank axis: down parts vertically
/// into `R x d_in`, up parts horizontally into `d_out x R`, where `R` is the
/// summed rank. Part order is preserved, so
/// `up_concat * down_concat == sum_i up_i * down_i` (exactly in exact
/// arithmetic). An empty part list yields `0 x d_in` / `d_out x 0` factors
/// whose product is the zero matrix.
pub fn concat_rank(
    parts_down: &[&Matrix],
    parts_up: &[&Matrix],
    d_in: usize,
    d_out: usize,
) -> Result<(Matrix, Matrix), LinalgError> {
    if parts_down.len() != parts_up.len() {
        return Err(LinalgError::ConcatPart {
            index: 0,
            msg: format!(
                "{} down parts vs {} up parts",
                parts_down.len(),
                parts_up.len()
            ),
        });
    }
    let mut total_rank = 0usize;
    for (i, (d, u)) in parts_down.iter().zip(parts_up).enumerate() {
        if d.cols != d_in {
            return Err(LinalgError::ConcatPart {
                index: i,
                msg: format!("down part has d_in {} (expected {})", d.cols, d_in),
            });
        }
        if u.rows != d_out {
            return Err(LinalgError::ConcatPart {
                index: i,
                msg: format!("up part has d_out {} (expected {})", u.rows, d_out),
            });
        }
        if d.rows != u.cols {
            return Err(LinalgError::ConcatPart {
                index: i,
                msg: format!("rank mismatch: down {} rows vs up {} cols", d.rows, u.cols),
            });
        }
        total_rank += d.rows;
    }

    let mut down_data = Vec::with_capacity(total_rank * d_in);
    for d in parts_down {
        down_data.extend_from_slice(&d.data);
    }
    let down = Matrix::new(total_rank, d_in, down_data)?;

    let mut up = Matrix::zeros(d_out, total_rank);
    let mut col_off = 0usize;
    for u in parts_up {
        for r in 0..d_out {
            let dst = &mut up.data[r * total_rank + col_off..r * total_rank + col_off + u.cols];
            dst.copy_from_slice(u.row(r));
        }
        col_off += u.cols;
    }
    Ok((down, up))
}

/// Relative Frobenius distance `|a - b|_F / max(|b|_F, eps)`.
pub fn rel_frobenius_dist(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "shape mismatch");
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

/// Largest elementwise relative difference, with an absolute floor for
/// near-zero references.
pub fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}
