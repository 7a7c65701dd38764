//! Dense row-major `f64` tensors and the handful of kernels the pipeline uses.
//!
//! Every kernel that performs multiply-accumulates reports them to a
//! thread-local counter (see [`mac_count`]) so cost can be measured exactly,
//! independent of wall-clock noise.

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates recorded on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `R×C` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * c);
        for r in rows {
            let r = r.as_ref();
            if r.len() != c {
                return Err(Error::shape("from_rows", &[c], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![n, c], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a matrix; for higher ranks, the size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.data.len() / self.shape[0];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for (a_row, o_row) in self.data.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            for (&a, b_row) in a_row.iter().zip(other.data.chunks_exact(n)) {
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        add_macs((m * k * n) as u64);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (_, c) = self.expect_matrix("softmax_rows")?;
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::new(self.shape.clone(), out)
    }

    /// Sums a matrix over its rows, giving a `1×C` row.
    pub fn sum_rows(&self) -> Result<Self> {
        let (_, c) = self.expect_matrix("sum_rows")?;
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self::new(vec![1, c], out)
    }

    /// Rows `idx` of an `N×C` matrix, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (n, c) = self.expect_matrix("gather_rows")?;
        check_indices("gather_rows", idx, n)?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self::new(vec![idx.len(), c], data)
    }

    /// Copy of `self` with rows `idx` replaced by the rows of `rows`.
    pub fn scatter_rows(&self, idx: &[usize], rows: &Self) -> Result<Self> {
        let (n, c) = self.expect_matrix("scatter_rows")?;
        let (m, c2) = rows.expect_matrix("scatter_rows")?;
        if c != c2 || m != idx.len() {
            return Err(Error::shape("scatter_rows", &[idx.len(), c], &rows.shape));
        }
        check_indices("scatter_rows", idx, n)?;
        let mut out = self.clone();
        for (r, &i) in idx.iter().enumerate() {
            out.data[i * c..(i + 1) * c].copy_from_slice(&rows.data[r * c..(r + 1) * c]);
        }
        Ok(out)
    }

    /// Stacks matrices of equal width on top of each other.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
        let (_, c) = first.expect_matrix("concat_rows")?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let (r, c2) = p.expect_matrix("concat_rows")?;
            if c2 != c {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            n += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![n, c], data)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.expect_matrix("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of 0..{c}", start + len),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in self.data.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Self::new(vec![r, len], data)
    }

    /// Places matrices of equal height side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_cols of nothing".into()))?;
        let (r, _) = first.expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r2, c) = p.expect_matrix("concat_cols")?;
            if r2 != r {
                return Err(Error::shape("concat_cols", &first.shape, &p.shape));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Self::new(vec![r, total], data)
    }

    /// Bilinear upsampling of an `H×W×C` map by an integer factor, using the
    /// half-pixel (align-corners = false) sampling convention.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Self> {
        let (h, w, c) = self.expect_grid("upsample_bilinear")?;
        if factor == 0 {
            return Err(Error::Argument("upsample factor must be >= 1".into()));
        }
        let ys = taps(h, factor);
        let xs = taps(w, factor);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; oh * ow * c];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (iy, wy) in [(ty.0, ty.2), (ty.1, ty.3)] {
                    for (ix, wx) in [(tx.0, tx.2), (tx.1, tx.3)] {
                        let wgt = wy * wx;
                        let src = &self.data[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
        add_macs((oh * ow * c * 4) as u64);
        Self::new(vec![oh, ow, c], out)
    }

    /// Adjoint of [`Tensor::upsample_bilinear`]: maps a gradient on the
    /// upsampled grid back onto the `h×w` source grid.
    pub(crate) fn upsample_bilinear_adjoint(grad: &Self, h: usize, w: usize, factor: usize) -> Self {
        let c = grad.cols();
        let ys = taps(h, factor);
        let xs = taps(w, factor);
        let ow = w * factor;
        let mut out = vec![0.0; h * w * c];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let g = &grad.data[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (iy, wy) in [(ty.0, ty.2), (ty.1, ty.3)] {
                    for (ix, wx) in [(tx.0, tx.2), (tx.1, tx.3)] {
                        let wgt = wy * wx;
                        let dst = &mut out[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
        Self {
            shape: vec![h, w, c],
            data: out,
        }
    }

    fn expect_grid(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0, 0])),
        }
    }
}

/// Per-output-index source taps `(i0, i1, w0, w1)` along one axis.
fn taps(len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = 1.0 / factor as f64;
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn check_indices(op: &'static str, idx: &[usize], n: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(idx.len());
    for &i in idx {
        if i >= n {
            return Err(Error::Index {
                op,
                msg: format!("index {i} out of range for {n} rows"),
            });
        }
        if !seen.insert(i) {
            return Err(Error::Index {
                op,
                msg: format!("duplicate index {i}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selection() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[2.0], [5.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_counts_macs() {
        reset_mac_count();
        Tensor::zeros(&[3, 4]).matmul(&Tensor::zeros(&[4, 5])).unwrap();
        assert_eq!(mac_count(), 60);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::from_rows(&[[0.0, 0.0]]).unwrap().softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::from_rows(&[[2f64.ln(), 0.0]]).unwrap().softmax_rows().unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = Tensor::from_rows(&[[1000.0, 0.0]]).unwrap().softmax_rows().unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
    }

    /// Direct evaluation of the half-pixel bilinear formula for one output pixel.
    fn bilinear_pixel(x: &Tensor, factor: usize, oy: usize, ox: usize, ch: usize) -> f64 {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let at = |y: usize, xx: usize| x.data()[(y * w + xx) * c + ch];
        let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
        let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
        let bottom = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
        top * (1.0 - ly) + bottom * ly
    }

    #[test]
    fn upsample_constant_and_identity() {
        let x = Tensor::full(&[2, 2, 1], 7.0);
        let up = x.upsample_bilinear(4).unwrap();
        assert_eq!(up.shape(), &[8, 8, 1]);
        assert!(up.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(&[3, 5, 2], &mut rng);
        assert_eq!(r.upsample_bilinear(1).unwrap(), r);
        assert!(matches!(r.upsample_bilinear(0), Err(Error::Argument(_))));
    }

    #[test]
    fn upsample_ramp_matches_direct_formula() {
        let ramp = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = ramp.upsample_bilinear(2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let want = bilinear_pixel(&ramp, 2, oy, ox, 0);
                assert!((up.data()[oy * 4 + ox] - want).abs() < 1e-12);
            }
        }
        // Interior samples of a ramp fall on quarter-pixel offsets.
        assert!((up.data()[5] - 0.75).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random(&[3, 4, 3], &mut rng);
        let up = r.upsample_bilinear(4).unwrap();
        for oy in 0..12 {
            for ox in 0..16 {
                for ch in 0..3 {
                    let want = bilinear_pixel(&r, 4, oy, ox, ch);
                    assert!((up.data()[(oy * 16 + ox) * 3 + ch] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 2], &mut rng);
        let g = random(&[9, 6, 2], &mut rng);
        let lhs: f64 = x
            .upsample_bilinear(3)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let adj = Tensor::upsample_bilinear_adjoint(&g, 3, 2, 3);
        let rhs: f64 = adj.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[5, 3], &mut rng);
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(x.gather_rows(&all).unwrap(), x);
        let idx = [4, 1, 2];
        let rows = x.gather_rows(&idx).unwrap();
        assert_eq!(x.scatter_rows(&idx, &rows).unwrap(), x);
        let base = Tensor::zeros(&[5, 3]);
        let scattered = base.scatter_rows(&idx, &rows).unwrap();
        assert_eq!(scattered.gather_rows(&idx).unwrap(), rows);
    }

    #[test]
    fn gather_rejects_bad_indices() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(x.gather_rows(&[3]), Err(Error::Index { .. })));
        assert!(matches!(x.gather_rows(&[1, 1]), Err(Error::Index { .. })));
        let rows = Tensor::zeros(&[2, 2]);
        assert!(matches!(x.scatter_rows(&[0, 0], &rows), Err(Error::Index { .. })));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..9,
            seed in any::<u64>(),
            spread in 0.0f64..500.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[rows, cols], &mut rng).scale(spread);
            let s = x.softmax_rows().unwrap();
            for r in 0..rows {
                let row = s.row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn matmul_is_associative(
            m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, l], &mut rng);
            let c = random(&[l, n], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }
    }
}
