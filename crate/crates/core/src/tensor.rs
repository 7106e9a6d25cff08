//! Dense row-major 2-D tensors of `f64` and the kernels shared by the
//! autodiff graph and inference paths.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `[start, end)` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor { rows: self.rows, cols: width, data }
    }

    /// Rows `[start, end)` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        let rows = parts.first().map_or(0, |t| t.rows);
        let cols: usize = parts.iter().map(|t| t.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols);
        let rows: usize = parts.iter().map(|t| t.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&p.data);
        }
        Tensor { rows, cols, data }
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Tensor { rows: ids.len(), cols: self.cols, data }
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `out = alpha * op(a) * op(b) + beta * out` with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    alpha: f64,
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    beta: f64,
    out: &mut Tensor,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    assert_eq!(out.shape(), (m, n), "matmul output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_assign(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and dimensions describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut out);
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.rows);
    gemm(1.0, a, false, b, true, 0.0, &mut out);
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, b.cols);
    gemm(1.0, a, true, b, false, 0.0, &mut out);
    out
}

/// `out += a · b`
pub fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    gemm(1.0, a, false, b, false, 1.0, out);
}

/// `out += a · bᵀ`
pub fn matmul_nt_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    gemm(1.0, a, false, b, true, 1.0, out);
}

/// `out += aᵀ · b`
pub fn matmul_tn_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    gemm(1.0, a, true, b, false, 1.0, out);
}

/// Numerically stable in-place softmax of a slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / xs.len() as f64;
        xs.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter_mut().for_each(|x| *x -= lse);
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows {
        log_softmax_in_place(out.row_mut(r));
    }
    out
}

/// Sinusoidal position encodings, `positions x dim`.
pub fn sinusoidal_positions(positions: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(positions, dim);
    for pos in 0..positions {
        for i in (0..dim).step_by(2) {
            let freq = (-(i as f64) * (10000f64).ln() / dim as f64).exp();
            let angle = pos as f64 * freq;
            pe.set(pos, i, angle.sin());
            if i + 1 < dim {
                pe.set(pos, i + 1, angle.cos());
            }
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a = Tensor::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect());
        let b = Tensor::from_vec(4, 2, (0..8).map(|v| (v as f64).sin()).collect());
        let want = naive(&a, &b);
        let got = matmul(&a, &b);
        let got_nt = matmul_nt(&a, &b.transpose());
        let got_tn = matmul_tn(&a.transpose(), &b);
        for (i, x) in want.data().iter().enumerate() {
            for other in [&got, &got_nt, &got_tn] {
                assert!((x - other.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_handles_extremes() {
        let mut xs = [1000.0, 0.0, -1000.0];
        softmax_in_place(&mut xs);
        assert!((xs[0] - 1.0).abs() < 1e-12);
        let mut ls = [0.0, 0.0];
        log_softmax_in_place(&mut ls);
        assert!((ls[0] + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn slicing_and_concat_are_inverse() {
        let t = Tensor::from_vec(2, 5, (0..10).map(f64::from).collect());
        let a = t.slice_cols(0, 2);
        let b = t.slice_cols(2, 5);
        assert_eq!(Tensor::concat_cols(&[&a, &b]), t);
        let top = t.slice_rows(0, 1);
        let bottom = t.slice_rows(1, 2);
        assert_eq!(Tensor::concat_rows(&[&top, &bottom]), t);
    }
}
