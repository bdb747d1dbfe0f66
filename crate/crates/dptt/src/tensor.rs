//! Dense 2-D tensors of `f32` with 64-bit accumulation in reductions.
//!
//! Storage is always 32-bit, row-major. Dot products, norms, means and
//! variances accumulate in `f64` with a fixed iteration order, which keeps
//! clipping norms and layer statistics bit-reproducible across runs.
//!
//! Shape mismatches and non-finite outputs are contract violations and
//! panic with the offending operation named.

/// Dense row-major tensor. Rank is 2 throughout the crate: scalars are
/// `[1, 1]`, row vectors `[1, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor: shape [{rows}, {cols}] does not match data length {}",
            data.len()
        );
        Self { shape: [rows, cols], data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { shape: [rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f32) -> Self {
        Self { shape: [1, 1], data: vec![v] }
    }

    pub fn row(data: Vec<f32>) -> Self {
        Self { shape: [1, data.len()], data }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self { shape: [rows, cols], data: vec![v; rows * cols] }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[f32] {
        let n = self.shape[1];
        &self.data[r * n..(r + 1) * n]
    }

    /// Scalar value; panics if not `[1, 1]`.
    pub fn item(&self) -> f32 {
        assert_eq!(self.shape, [1, 1], "item: tensor is {:?}, not a scalar", self.shape);
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(
            rows * cols,
            self.data.len(),
            "reshape: [{},{}] -> [{rows},{cols}] changes element count",
            self.shape[0],
            self.shape[1]
        );
        Tensor { shape: [rows, cols], data: self.data.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares in f64, fixed order.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    /// In-place `self += other`, accumulating through f64.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = (f64::from(*a) + f64::from(b)) as f32;
        }
    }

    /// In-place `self -= scale * other` over all coordinates.
    pub fn sub_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape, "sub_scaled: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = (f64::from(*a) - scale * f64::from(b)) as f32;
        }
    }

    /// Scales every coordinate through f64.
    pub fn scale_in_place(&mut self, factor: f64) {
        for a in &mut self.data {
            *a = (f64::from(*a) * factor) as f32;
        }
    }
}

pub(crate) fn assert_finite(op: &str, t: &Tensor) {
    if !t.is_finite() {
        panic!("numeric fault: non-finite output from op `{op}`");
    }
}

/// `a (m,k) · b (k,n) -> (m,n)` with f64 accumulators.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul: inner dims {k} vs {kb}");
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let crow = &mut acc[i * n..(i + 1) * n];
        for (t, &aik) in arow.iter().enumerate() {
            let aik = f64::from(aik);
            let brow = b.row_slice(t);
            for (c, &btj) in crow.iter_mut().zip(brow) {
                *c += aik * f64::from(btj);
            }
        }
    }
    let out = Tensor::new(m, n, acc.into_iter().map(|v| v as f32).collect());
    assert_finite("matmul", &out);
    out
}

/// `a (m,k) · bᵀ` where `b` is `(n,k)` -> `(m,n)`. Row-by-row dot products.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_nt: inner dims {k} vs {kb}");
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..n {
            let brow = b.row_slice(j);
            let dot: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            out.push(dot as f32);
        }
    }
    let out = Tensor::new(m, n, out);
    assert_finite("matmul_nt", &out);
    out
}

/// `aᵀ · b` where `a` is `(k,m)`, `b` is `(k,n)` -> `(m,n)`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_tn: inner dims {k} vs {kb}");
    let mut acc = vec![0.0f64; m * n];
    for t in 0..k {
        let arow = a.row_slice(t);
        let brow = b.row_slice(t);
        for (i, &ati) in arow.iter().enumerate() {
            let ati = f64::from(ati);
            let crow = &mut acc[i * n..(i + 1) * n];
            for (c, &btj) in crow.iter_mut().zip(brow) {
                *c += ati * f64::from(btj);
            }
        }
    }
    let out = Tensor::new(m, n, acc.into_iter().map(|v| v as f32).collect());
    assert_finite("matmul_tn", &out);
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::new(a.rows(), a.cols(), data);
    assert_finite("add", &out);
    out
}

/// Adds a `[1, n]` bias row to every row of `a (m, n)`.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(bias.rows(), 1, "add_bias: bias must be a row vector");
    assert_eq!(a.cols(), bias.cols(), "add_bias: width mismatch");
    let mut out = a.clone();
    for r in 0..a.rows() {
        let row = &mut out.data[r * a.cols()..(r + 1) * a.cols()];
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    assert_finite("add_bias", &out);
    out
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    let data = a.data().iter().map(|&v| v * factor).collect();
    let out = Tensor::new(a.rows(), a.cols(), data);
    assert_finite("scale", &out);
    out
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.at(i, j);
        }
    }
    Tensor::new(n, m, data)
}

/// Row-wise softmax with max-subtraction; each output row sums to 1.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = a.row_slice(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| (e / sum) as f32));
    }
    let out = Tensor::new(m, n, out);
    assert_finite("softmax", &out);
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm: `gamma * (x - mean) / sqrt(var + eps) + beta`.
/// Statistics per row in f64.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    assert_eq!(gamma.shape(), [1, n], "layer_norm: gamma must be [1, {n}]");
    assert_eq!(beta.shape(), [1, n], "layer_norm: beta must be [1, {n}]");
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = x.row_slice(r);
        let (mean, var) = row_mean_var(row);
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, &v) in row.iter().enumerate() {
            let xhat = (f64::from(v) - mean) * inv;
            out.push((xhat * f64::from(gamma.data()[j]) + f64::from(beta.data()[j])) as f32);
        }
    }
    let out = Tensor::new(m, n, out);
    assert_finite("layer_norm", &out);
    out
}

pub(crate) fn row_mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var: f64 = row
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// Horizontal concatenation of tensors with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_cols: empty input");
    let m = parts[0].rows();
    assert!(
        parts.iter().all(|p| p.rows() == m),
        "concat_cols: row count mismatch"
    );
    let n: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(m * n);
    for r in 0..m {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    Tensor::new(m, n, data)
}

/// Vertical concatenation of tensors with equal column counts.
pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows: empty input");
    let n = parts[0].cols();
    assert!(
        parts.iter().all(|p| p.cols() == n),
        "concat_rows: column count mismatch"
    );
    let m: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(m * n);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(m, n, data)
}

/// Columns `[start, start+len)` of `a`.
pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Tensor {
    assert!(
        start + len <= a.cols(),
        "slice_cols: [{start}, {}) out of width {}",
        start + len,
        a.cols()
    );
    let mut data = Vec::with_capacity(a.rows() * len);
    for r in 0..a.rows() {
        let row = a.row_slice(r);
        data.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(a.rows(), len, data)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross entropy from a logit:
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn sigmoid_cross_entropy(logit: f32, target: f32) -> f32 {
    let z = f64::from(logit);
    let y = f64::from(target);
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    let out = loss as f32;
    assert!(out.is_finite(), "numeric fault: non-finite output from op `sigmoid_cross_entropy`");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let eye = Tensor::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::new(3, 2, vec![1.5, -2.0, 0.25, 3.0, -1.0, 0.5]);
        assert_eq!(matmul(&eye, &a), a);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c, matmul_nt(&a, &transpose(&b)));
        assert_eq!(c, matmul_tn(&transpose(&a), &b));
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let s = softmax_rows(&Tensor::row(vec![0.0, 0.0, 0.0]));
        let third = (1.0f64 / 3.0) as f32;
        assert_eq!(s.data(), &[third, third, third]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(2, 4, vec![1.0, -2.0, 0.5, 3.0, 100.0, 99.0, 98.0, 97.0]);
        let s = softmax_rows(&t);
        for r in 0..2 {
            let sum: f64 = s.row_slice(r).iter().map(|&v| f64::from(v)).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let x = Tensor::row(vec![5.0, 5.0, 5.0, 5.0]);
        let gamma = Tensor::filled(1, 4, 1.0);
        let beta = Tensor::zeros(1, 4);
        let y = layer_norm_rows(&x, &gamma, &beta);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_standardizes_nondegenerate_rows() {
        let x = Tensor::new(1, 6, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let gamma = Tensor::filled(1, 6, 1.0);
        let beta = Tensor::zeros(1, 6);
        let y = layer_norm_rows(&x, &gamma, &beta);
        let (mean, var) = row_mean_var(y.row_slice(0));
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let cat = concat_cols(&[&a, &b]);
        assert_eq!(cat.shape(), [2, 5]);
        assert_eq!(slice_cols(&cat, 0, 2), a);
        assert_eq!(slice_cols(&cat, 2, 3), b);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        assert!(sigmoid_cross_entropy(1000.0, 1.0) < 1e-6);
        assert!((f64::from(sigmoid_cross_entropy(-1000.0, 1.0)) - 1000.0).abs() < 1e-3);
        let l = sigmoid_cross_entropy(0.0, 1.0);
        assert!((f64::from(l) - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "matmul: inner dims")]
    fn matmul_rejects_mismatched_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        matmul(&a, &b);
    }
}
