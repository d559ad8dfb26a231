//! Minimal dense numeric kernel: matrices, row softmax, RMS normalization,
//! SiLU, rotary position embedding, top-k selection.
//!
//! All accumulations run in ascending index order with explicit `mul_add`.
//! Incremental decode recomputes the same dot products one row at a time,
//! so keeping one summation order makes the cached and uncached paths
//! bit-identical.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element type for kernel math: `f32` in the engine, `f64` inside the
/// gradient-check path.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Per-session FLOP accumulator. Every matrix product adds `2·m·n·k`.
#[derive(Debug, Default)]
pub struct FlopCounter(AtomicU64);

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn add(&self, flops: u64) {
        self.0.fetch_add(flops, Ordering::Relaxed);
    }
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Copy of the column block `[col_start, col_start + width)`.
    pub fn col_block(&self, col_start: usize, width: usize) -> Matrix<T> {
        debug_assert!(col_start + width <= self.cols);
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            let src = &self.row(i)[col_start..col_start + width];
            out.row_mut(i).copy_from_slice(src);
        }
        out
    }

    /// Keep only the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix<T> {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a × b`, counting `2·m·n·k` FLOPs.
///
/// Accumulates over the inner dimension in ascending order via an
/// axpy-style kernel: `c[i][j] += a[i][l] * b[l][j]`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, flops: &FlopCounter) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::contract(format!(
            "matmul dimension mismatch: {}x{} × {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    flops.add(2 * a.rows as u64 * a.cols as u64 * b.cols as u64);
    let mut c = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b.data[l * n..(l + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v = a_il.mul_add(b_v, *c_v);
            }
        }
    }
    Ok(c)
}

/// Numerically stabilized softmax over each unmasked row prefix/pattern.
///
/// `mask(row, col) == true` marks a visible entry. Masked entries are
/// exactly zero in the output. A fully masked row is a contract violation.
pub fn softmax_rows<T: Scalar>(
    m: &Matrix<T>,
    mask: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let visible: Vec<usize> = (0..row.len())
            .filter(|&j| mask.map_or(true, |f| f(i, j)))
            .collect();
        if visible.is_empty() {
            return Err(Error::contract(format!("softmax row {i} fully masked")));
        }
        let mut max = T::neg_infinity();
        for &j in &visible {
            if row[j] > max {
                max = row[j];
            }
        }
        let mut sum = T::zero();
        for &j in &visible {
            row[j] = (row[j] - max).exp();
            sum += row[j];
        }
        let inv = T::one() / sum;
        let mut v = 0;
        for j in 0..row.len() {
            if v < visible.len() && visible[v] == j {
                row[j] = row[j] * inv;
                v += 1;
            } else {
                row[j] = T::zero();
            }
        }
    }
    Ok(out)
}

/// Softmax over the leading `visible` entries of a row; the rest are zeroed.
/// The engine's attention masks are always contiguous prefixes, so this is
/// the hot path behind [`softmax_rows`].
pub fn softmax_prefix_inplace<T: Scalar>(row: &mut [T], visible: usize) {
    debug_assert!(visible >= 1 && visible <= row.len());
    let mut max = T::neg_infinity();
    for &x in &row[..visible] {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in &mut row[..visible] {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in &mut row[..visible] {
        *x = *x * inv;
    }
    for x in &mut row[visible..] {
        *x = T::zero();
    }
}

/// RMS normalization: `y_i = gain_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    rmsnorm_into(x, gain, eps, &mut out);
    out
}

/// In-place variant writing into `out`; returns `1/sqrt(mean(x²)+eps)`
/// (the backward pass reuses it).
pub fn rmsnorm_into<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    assert_eq!(x.len(), gain.len(), "rmsnorm length mismatch");
    let n = T::from_f64(x.len() as f64);
    let mut ss = T::zero();
    for &v in x {
        ss = v.mul_add(v, ss);
    }
    let inv = T::one() / (ss / n + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * v * inv;
    }
    inv
}

/// SiLU activation `x · sigmoid(x)`, elementwise in place.
pub fn silu_inplace<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        let s = T::one() / (T::one() + (-*x).exp());
        *x = *x * s;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Precomputed rotary cos/sin table: `angle(p, j) = p · base^(-2j/d)`.
#[derive(Debug, Clone)]
pub struct RopeTable<T = f32> {
    head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(base: f64, head_dim: usize, max_positions: usize) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::config(format!("odd head dimension {head_dim}")));
        }
        let half = head_dim / 2;
        let mut cos = vec![T::zero(); max_positions * half];
        let mut sin = vec![T::zero(); max_positions * half];
        for p in 0..max_positions {
            for j in 0..half {
                let inv_freq = base.powf(-(2.0 * j as f64) / head_dim as f64);
                let angle = T::from_f64(p as f64 * inv_freq);
                cos[p * half + j] = angle.cos();
                sin[p * half + j] = angle.sin();
            }
        }
        Ok(RopeTable { head_dim, cos, sin })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotate one head vector at absolute `position`, pairing adjacent lanes.
    pub fn rotate_row(&self, row: &mut [T], position: usize) {
        debug_assert_eq!(row.len(), self.head_dim);
        let half = self.head_dim / 2;
        let cos = &self.cos[position * half..(position + 1) * half];
        let sin = &self.sin[position * half..(position + 1) * half];
        for j in 0..half {
            let x = row[2 * j];
            let y = row[2 * j + 1];
            row[2 * j] = x * cos[j] - y * sin[j];
            row[2 * j + 1] = x * sin[j] + y * cos[j];
        }
    }

    /// Inverse rotation; the backward pass pulls gradients back through
    /// the (orthogonal) forward rotation.
    pub fn rotate_row_inverse(&self, row: &mut [T], position: usize) {
        let half = self.head_dim / 2;
        let cos = &self.cos[position * half..(position + 1) * half];
        let sin = &self.sin[position * half..(position + 1) * half];
        for j in 0..half {
            let x = row[2 * j];
            let y = row[2 * j + 1];
            row[2 * j] = x * cos[j] + y * sin[j];
            row[2 * j + 1] = -x * sin[j] + y * cos[j];
        }
    }
}

/// Rotary position embedding over per-head row vectors.
pub fn rope_apply<T: Scalar>(
    m: &Matrix<T>,
    positions: &[usize],
    base: f64,
) -> Result<Matrix<T>> {
    if positions.len() != m.rows() {
        return Err(Error::contract(format!(
            "rope positions {} != rows {}",
            positions.len(),
            m.rows()
        )));
    }
    let max_pos = positions.iter().copied().max().map_or(0, |p| p + 1);
    let table = RopeTable::new(base, m.cols(), max_pos)?;
    let mut out = m.clone();
    for (i, &p) in positions.iter().enumerate() {
        table.rotate_row(out.row_mut(i), p);
    }
    Ok(out)
}

/// Indices and values of the `k` largest entries, descending by value,
/// ties broken by ascending index.
pub fn topk(scores: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if k > scores.len() {
        return Err(Error::contract(format!(
            "topk k={k} > length {}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    Ok(idx.into_iter().take(k).map(|i| (i, scores[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity_preserves() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let id = Matrix::<f32>::identity(3);
        let c = matmul(&id, &m, &FlopCounter::new()).unwrap();
        assert_eq!(c, m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_vec(1, 2, vec![1.0f32, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b, &FlopCounter::new()).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_flop_accounting() {
        let flops = FlopCounter::new();
        let a = Matrix::<f32>::zeros(4, 8);
        let b = Matrix::<f32>::zeros(8, 8);
        matmul(&a, &b, &flops).unwrap();
        assert_eq!(flops.get(), 512); // 2·4·8·8
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 2);
        assert!(matches!(
            matmul(&a, &b, &FlopCounter::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::from_vec(1, 2, vec![0.0f32, 0.0]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let m = Matrix::from_vec(1, 2, vec![3.7f32, 100.0]).unwrap();
        let mask = |_: usize, j: usize| j == 0;
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let m = Matrix::from_vec(1, 2, vec![1.0f32.ln(), 3.0f32.ln()]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert_relative_eq!(s.data()[0], 0.25, max_relative = 1e-6);
        assert_relative_eq!(s.data()[1], 0.75, max_relative = 1e-6);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let m = Matrix::from_vec(1, 2, vec![1.0f32, 2.0]).unwrap();
        let mask = |_: usize, _: usize| false;
        assert!(matches!(
            softmax_rows(&m, Some(&mask)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_prefix_matches_masked() {
        let m = Matrix::from_vec(2, 4, vec![0.3f32, -1.0, 2.0, 9.0, 0.0, 0.5, -0.5, 9.0]).unwrap();
        let mask = |_: usize, j: usize| j < 3;
        let by_mask = softmax_rows(&m, Some(&mask)).unwrap();
        let mut by_prefix = m.clone();
        for i in 0..2 {
            softmax_prefix_inplace(by_prefix.row_mut(i), 3);
        }
        assert_eq!(by_mask, by_prefix);
    }

    #[test]
    fn rmsnorm_unit_rms() {
        let x = vec![1.0f32; 5];
        let g = vec![1.0f32; 5];
        assert_eq!(rmsnorm(&x, &g, 0.0), x);
    }

    #[test]
    fn rmsnorm_hand_case() {
        let y = rmsnorm(&[3.0f32, -3.0], &[1.0, 1.0], 0.0);
        assert_relative_eq!(y[0], 1.0, max_relative = 1e-6);
        assert_relative_eq!(y[1], -1.0, max_relative = 1e-6);
    }

    #[test]
    fn rmsnorm_zero_gain() {
        let y = rmsnorm(&[3.0f32, -3.0], &[0.0, 0.0], 0.0);
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let m = Matrix::from_vec(1, 4, vec![0.1f32, -0.7, 2.0, 3.5]).unwrap();
        let r = rope_apply(&m, &[0], 10000.0).unwrap();
        assert_eq!(r, m);
    }

    #[test]
    fn rope_two_dim_rotation() {
        let m = Matrix::from_vec(1, 2, vec![1.0f32, 0.0]).unwrap();
        // head_dim 2 ⇒ inv_freq = 1 ⇒ angle = position.
        let r = rope_apply(&m, &[7], 10000.0).unwrap();
        assert_relative_eq!(r.data()[0], (7.0f32).cos(), max_relative = 1e-6);
        assert_relative_eq!(r.data()[1], (7.0f32).sin(), max_relative = 1e-6);
    }

    #[test]
    fn rope_odd_head_dim_errors() {
        let m = Matrix::from_vec(1, 3, vec![1.0f32, 0.0, 0.0]).unwrap();
        assert!(matches!(
            rope_apply(&m, &[1], 10000.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let table = RopeTable::<f32>::new(10000.0, 8, 20).unwrap();
        let orig = vec![0.3f32, -1.2, 0.5, 2.0, -0.1, 0.9, 1.1, -2.2];
        let mut row = orig.clone();
        table.rotate_row(&mut row, 13);
        table.rotate_row_inverse(&mut row, 13);
        for (a, b) in row.iter().zip(&orig) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn topk_basic() {
        assert_eq!(topk(&[1.0, 3.0, 2.0], 2).unwrap(), vec![(1, 3.0), (2, 2.0)]);
    }

    #[test]
    fn topk_ties_by_index() {
        assert_eq!(
            topk(&[5.0, 5.0, 5.0], 2).unwrap(),
            vec![(0, 5.0), (1, 5.0)]
        );
    }

    #[test]
    fn topk_full_sort() {
        assert_eq!(
            topk(&[1.0, 3.0, 2.0], 3).unwrap(),
            vec![(1, 3.0), (2, 2.0), (0, 1.0)]
        );
    }

    #[test]
    fn topk_oversized_errors() {
        assert!(matches!(topk(&[1.0], 2), Err(Error::Contract(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(
                vals in proptest::collection::vec(-30.0f32..30.0, 1..24),
            ) {
                let m = Matrix::from_vec(1, vals.len(), vals).unwrap();
                let s = softmax_rows(&m, None).unwrap();
                let sum: f32 = s.data().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                prop_assert!(s.data().iter().all(|v| v.is_finite() && *v >= 0.0));
            }

            #[test]
            fn softmax_masked_entries_exactly_zero(
                vals in proptest::collection::vec(-30.0f32..30.0, 2..24),
                cut in 1usize..23,
            ) {
                let cut = cut.min(vals.len() - 1).max(1);
                let m = Matrix::from_vec(1, vals.len(), vals).unwrap();
                let mask = move |_: usize, j: usize| j < cut;
                let s = softmax_rows(&m, Some(&mask)).unwrap();
                prop_assert!(s.data()[cut..].iter().all(|v| *v == 0.0));
            }

            #[test]
            fn matmul_flops_are_2mnk(m in 1usize..6, n in 1usize..6, k in 1usize..6) {
                let flops = FlopCounter::new();
                let a = Matrix::<f32>::zeros(m, k);
                let b = Matrix::<f32>::zeros(k, n);
                matmul(&a, &b, &flops).unwrap();
                prop_assert_eq!(flops.get(), 2 * (m * n * k) as u64);
            }

            #[test]
            fn rope_preserves_norm(
                vals in proptest::collection::vec(-3.0f32..3.0, 4),
                pos in 0usize..64,
            ) {
                let m = Matrix::from_vec(1, 4, vals).unwrap();
                let r = rope_apply(&m, &[pos], 10000.0).unwrap();
                let n0: f32 = m.data().iter().map(|v| v * v).sum::<f32>().sqrt();
                let n1: f32 = r.data().iter().map(|v| v * v).sum::<f32>().sqrt();
                prop_assert!((n0 - n1).abs() < 1e-5 * n0.max(1.0));
            }

            #[test]
            fn rope_rotations_compose(
                vals in proptest::collection::vec(-3.0f32..3.0, 6),
                p in 0usize..32,
                q in 0usize..32,
            ) {
                let m = Matrix::from_vec(1, 6, vals).unwrap();
                let two_step = rope_apply(&rope_apply(&m, &[p], 10000.0).unwrap(), &[q], 10000.0).unwrap();
                let one_step = rope_apply(&m, &[p + q], 10000.0).unwrap();
                for (a, b) in two_step.data().iter().zip(one_step.data()) {
                    prop_assert!((a - b).abs() < 1e-5);
                }
            }

            #[test]
            fn topk_descending_ties_ascending(
                vals in proptest::collection::vec(-10i32..10, 1..16),
                k in 0usize..16,
            ) {
                let scores: Vec<f32> = vals.iter().map(|v| *v as f32).collect();
                let k = k.min(scores.len());
                let out = topk(&scores, k).unwrap();
                for w in out.windows(2) {
                    prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
                }
            }
        }
    }
}
