//! Dense multiway arrays and the algebraic kernels the rest of the crate
//! builds on: aligned contraction, mode unfolding, Khatri-Rao products and
//! CP reconstruction.
//!
//! Everything is 64-bit and row-major (the last mode varies fastest). Mode
//! orderings are fixed here once; every other module reuses them.

use crate::error::{Error, Result};

/// Dense N-mode array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseTensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    /// Builds a tensor from a flat row-major buffer, checking length and
    /// finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidArg(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(DenseTensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        index.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.into()))
        }
    }
}

/// Dense row-major matrix. Factor matrices (rows = mode size, cols = rank)
/// use this type, as do unfoldings, kernels and interpolation operators in
/// dense form.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArg(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix construction".into()));
        }
        Ok(Matrix { rows, cols, data })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch { mode: 1, left: self.cols, right: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Gram matrix `AᵀA` (cols x cols).
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                for j in i..self.cols {
                    let v = row[i] * row[j];
                    g.data[i * self.cols + j] += v;
                }
            }
        }
        for i in 0..self.cols {
            for j in 0..i {
                g.data[i * self.cols + j] = g.data[j * self.cols + i];
            }
        }
        g
    }

    pub fn col_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                norms[c] += v * v;
            }
        }
        norms.into_iter().map(f64::sqrt).collect()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Sums elementwise products of `w` and `x` over `modes`; the remaining
/// modes stay aligned and keep their order. Both tensors must share a
/// shape, which is how the weight/input contraction of the forward pass
/// is expressed.
pub fn contract_modes(w: &DenseTensor, x: &DenseTensor, modes: &[usize]) -> Result<DenseTensor> {
    if w.ndim() != x.ndim() {
        return Err(Error::InvalidArg(format!(
            "contract_modes: {} vs {} modes",
            w.ndim(),
            x.ndim()
        )));
    }
    for m in 0..w.ndim() {
        if w.shape[m] != x.shape[m] {
            return Err(Error::ShapeMismatch { mode: m, left: w.shape[m], right: x.shape[m] });
        }
    }
    for &m in modes {
        if m >= w.ndim() {
            return Err(Error::ModeOutOfRange { mode: m, ndim: w.ndim() });
        }
    }
    let keep: Vec<usize> = (0..w.ndim()).filter(|m| !modes.contains(m)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&m| w.shape[m]).collect();
    let mut out = DenseTensor::zeros(&out_shape);

    // Output stride contribution per input mode: zero for contracted modes.
    let out_strides = strides_of(&out_shape);
    let mut contrib = vec![0usize; w.ndim()];
    for (pos, &m) in keep.iter().enumerate() {
        contrib[m] = out_strides[pos];
    }

    let mut index = vec![0usize; w.ndim()];
    let mut out_flat = 0usize;
    for i in 0..w.data.len() {
        out.data[out_flat] += w.data[i] * x.data[i];
        // Odometer increment over the shared shape.
        for m in (0..w.ndim()).rev() {
            index[m] += 1;
            out_flat += contrib[m];
            if index[m] < w.shape[m] {
                break;
            }
            out_flat -= contrib[m] * w.shape[m];
            index[m] = 0;
        }
    }
    Ok(out)
}

/// Mode-`mode` matricization: that mode becomes the rows, the remaining
/// modes are flattened into columns in row-major order. Inverse of
/// [`mode_fold`].
pub fn mode_unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    if mode >= t.ndim() {
        return Err(Error::ModeOutOfRange { mode, ndim: t.ndim() });
    }
    let rows = t.shape[mode];
    let cols = t.len() / rows;
    let mut out = Matrix::zeros(rows, cols);
    let strides = t.strides();

    let other: Vec<usize> = (0..t.ndim()).filter(|&m| m != mode).collect();
    let mut index = vec![0usize; other.len()];
    for c in 0..cols {
        let base: usize = other.iter().zip(&index).map(|(&m, &i)| i * strides[m]).sum();
        for r in 0..rows {
            out.set(r, c, t.data[base + r * strides[mode]]);
        }
        for pos in (0..other.len()).rev() {
            index[pos] += 1;
            if index[pos] < t.shape[other[pos]] {
                break;
            }
            index[pos] = 0;
        }
    }
    Ok(out)
}

/// Refolds a mode-`mode` unfolding back into a tensor of shape `shape`.
pub fn mode_fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    if mode >= shape.len() {
        return Err(Error::ModeOutOfRange { mode, ndim: shape.len() });
    }
    if m.rows() != shape[mode] || m.rows() * m.cols() != shape.iter().product::<usize>() {
        return Err(Error::InvalidArg(format!(
            "fold: {}x{} matrix does not match shape {:?} along mode {}",
            m.rows(),
            m.cols(),
            shape,
            mode
        )));
    }
    let mut t = DenseTensor::zeros(shape);
    let strides = t.strides();
    let other: Vec<usize> = (0..shape.len()).filter(|&mm| mm != mode).collect();
    let mut index = vec![0usize; other.len()];
    for c in 0..m.cols() {
        let base: usize = other.iter().zip(&index).map(|(&mm, &i)| i * strides[mm]).sum();
        for r in 0..m.rows() {
            t.data[base + r * strides[mode]] = m.get(r, c);
        }
        for pos in (0..other.len()).rev() {
            index[pos] += 1;
            if index[pos] < shape[other[pos]] {
                break;
            }
            index[pos] = 0;
        }
    }
    Ok(t)
}

/// Column-wise Kronecker product. Row ordering nests left to right with the
/// first matrix varying slowest, matching the row-major unfolding.
pub fn khatri_rao(ms: &[&Matrix]) -> Result<Matrix> {
    if ms.is_empty() {
        return Err(Error::InvalidArg("khatri_rao: empty input".into()));
    }
    let k = ms[0].cols();
    for m in ms {
        if m.cols() != k {
            return Err(Error::RankMismatch { expected: k, found: m.cols() });
        }
    }
    if ms.len() == 1 {
        return Ok(ms[0].clone());
    }
    let rows: usize = ms.iter().map(|m| m.rows()).product();
    let mut out = Matrix::zeros(rows, k);
    let mut index = vec![0usize; ms.len()];
    for r in 0..rows {
        for c in 0..k {
            let mut v = 1.0;
            for (m, &i) in ms.iter().zip(&index) {
                v *= m.get(i, c);
            }
            out.set(r, c, v);
        }
        for pos in (0..ms.len()).rev() {
            index[pos] += 1;
            if index[pos] < ms[pos].rows() {
                break;
            }
            index[pos] = 0;
        }
    }
    Ok(out)
}

/// Reconstructs the dense tensor `W[i...] = Σ_k λ_k Π_m F_m[i_m, k]` from
/// per-mode factor matrices.
pub fn cp_reconstruct(factors: &[Matrix], lambdas: &[f64]) -> Result<DenseTensor> {
    if factors.is_empty() {
        return Err(Error::InvalidArg("cp_reconstruct: no factor matrices".into()));
    }
    let k = factors[0].cols();
    for f in factors {
        if f.cols() != k {
            return Err(Error::RankMismatch { expected: k, found: f.cols() });
        }
    }
    if lambdas.len() != k {
        return Err(Error::RankMismatch { expected: k, found: lambdas.len() });
    }
    let shape: Vec<usize> = factors.iter().map(|f| f.rows()).collect();
    let mut t = DenseTensor::zeros(&shape);
    let mut index = vec![0usize; factors.len()];
    for flat in 0..t.len() {
        let mut v = 0.0;
        for (kk, &lam) in lambdas.iter().enumerate() {
            let mut p = lam;
            for (f, &i) in factors.iter().zip(&index) {
                p *= f.get(i, kk);
            }
            v += p;
        }
        t.data[flat] = v;
        for m in (0..factors.len()).rev() {
            index[m] += 1;
            if index[m] < shape[m] {
                break;
            }
            index[m] = 0;
        }
    }
    Ok(t)
}

/// Applies a matrix along one mode: `out[..., i, ...] = Σ_j m[i, j] t[..., j, ...]`.
/// The mode size changes from `m.cols()` to `m.rows()`.
pub fn mode_multiply(t: &DenseTensor, m: &Matrix, mode: usize) -> Result<DenseTensor> {
    if mode >= t.ndim() {
        return Err(Error::ModeOutOfRange { mode, ndim: t.ndim() });
    }
    if t.shape[mode] != m.cols() {
        return Err(Error::ShapeMismatch { mode, left: t.shape[mode], right: m.cols() });
    }
    let unfolded = mode_unfold(t, mode)?;
    let product = m.matmul(&unfolded)?;
    let mut shape = t.shape.clone();
    shape[mode] = m.rows();
    mode_fold(&product, mode, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseTensor::from_vec(shape, data).unwrap()
    }

    /// Brute-force oracle: triple loop over every index, summing products
    /// over the contracted modes.
    fn contract_oracle(w: &DenseTensor, x: &DenseTensor, modes: &[usize]) -> DenseTensor {
        let keep: Vec<usize> = (0..w.ndim()).filter(|m| !modes.contains(m)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&m| w.shape()[m]).collect();
        let mut out = DenseTensor::zeros(&out_shape);
        let mut index = vec![0usize; w.ndim()];
        for flat in 0..w.len() {
            let out_idx: Vec<usize> = keep.iter().map(|&m| index[m]).collect();
            let v = out.get(&out_idx) + w.data()[flat] * x.data()[flat];
            out.set(&out_idx, v);
            for m in (0..w.ndim()).rev() {
                index[m] += 1;
                if index[m] < w.shape()[m] {
                    break;
                }
                index[m] = 0;
            }
        }
        out
    }

    #[test]
    fn contract_zero_tensor() {
        let w = DenseTensor::zeros(&[2, 3]);
        let x = DenseTensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        let out = contract_modes(&w, &x, &[0, 1]).unwrap();
        assert_eq!(out.shape(), &[] as &[usize]);
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn contract_diagonal_mask() {
        let w = DenseTensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = DenseTensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = contract_modes(&w, &x, &[0, 1]).unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn contract_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_tensor(&[3, 4, 5], &mut rng);
        let x = random_tensor(&[3, 4, 5], &mut rng);
        let got = contract_modes(&w, &x, &[1, 2]).unwrap();
        let want = contract_oracle(&w, &x, &[1, 2]);
        assert_eq!(got.shape(), &[3]);
        for (g, w_) in got.data().iter().zip(want.data()) {
            assert!((g - w_).abs() <= 1e-12 * w_.abs().max(1.0));
        }
    }

    #[test]
    fn contract_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let w = random_tensor(&[2, 3, 4], &mut rng);
            let x = random_tensor(&[2, 3, 4], &mut rng);
            let alpha: f64 = rng.gen_range(-3.0..3.0);
            let mut scaled = w.clone();
            scaled.scale(alpha);
            let lhs = contract_modes(&scaled, &x, &[0, 2]).unwrap();
            let rhs = contract_modes(&w, &x, &[0, 2]).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                let want = alpha * r;
                assert!((l - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn contract_shape_error_names_mode() {
        let w = DenseTensor::zeros(&[2, 3]);
        let x = DenseTensor::zeros(&[2, 4]);
        match contract_modes(&w, &x, &[1]) {
            Err(Error::ShapeMismatch { mode, left, right }) => {
                assert_eq!((mode, left, right), (1, 3, 4));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unfold_matrix_identity() {
        let t = DenseTensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = mode_unfold(&t, 0).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_constant_tensor() {
        let t = DenseTensor::from_vec(&[2, 3, 4], vec![1.0; 24]).unwrap();
        let m = mode_unfold(&t, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 8));
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unfold_fold_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&[3, 4, 5], &mut rng);
        for mode in 0..3 {
            let m = mode_unfold(&t, mode).unwrap();
            let back = mode_fold(&m, mode, t.shape()).unwrap();
            assert_eq!(back.data(), t.data(), "mode {mode} round-trip not bitwise");
        }
    }

    #[test]
    fn unfold_out_of_range() {
        let t = DenseTensor::zeros(&[2, 2]);
        assert!(matches!(mode_unfold(&t, 2), Err(Error::ModeOutOfRange { .. })));
    }

    #[test]
    fn khatri_rao_single_input() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = khatri_rao(&[&m]).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn khatri_rao_scalar_rows() {
        let a = Matrix::from_vec(1, 2, vec![2.0, 3.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![5.0, 7.0]).unwrap();
        let out = khatri_rao(&[&a, &b]).unwrap();
        assert_eq!(out.data(), &[10.0, 21.0]);
    }

    #[test]
    fn khatri_rao_matches_kron_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = khatri_rao(&[&a, &b]).unwrap();
        assert_eq!((out.rows(), out.cols()), (12, 2));
        // Per-column Kronecker brute force: row (i,j) -> a[i,c]*b[j,c].
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let want = a.get(i, c) * b.get(j, c);
                    assert!((out.get(i * 4 + j, c) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn khatri_rao_rank_mismatch() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(khatri_rao(&[&a, &b]), Err(Error::RankMismatch { .. })));
    }

    #[test]
    fn cp_reconstruct_rank_one_ones() {
        let a = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let b = Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let t = cp_reconstruct(&[a, b], &[1.0]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cp_reconstruct_annihilation() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let t = cp_reconstruct(&[a, b], &[1.0, 1.0]).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cp_reconstruct_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shapes = [3usize, 4, 2];
        let k = 2;
        let factors: Vec<Matrix> = shapes
            .iter()
            .map(|&n| {
                Matrix::from_vec(n, k, (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let t = cp_reconstruct(&factors, &[1.0, 1.0]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                for l in 0..2 {
                    let mut want = 0.0;
                    for kk in 0..k {
                        want += factors[0].get(i, kk) * factors[1].get(j, kk) * factors[2].get(l, kk);
                    }
                    assert!((t.get(&[i, j, l]) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mode_multiply_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_tensor(&[2, 3, 4], &mut rng);
        let mut eye = Matrix::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let out = mode_multiply(&t, &eye, 1).unwrap();
        assert_eq!(out.data(), t.data());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn tensor_strategy() -> impl Strategy<Value = (DenseTensor, usize)> {
            proptest::collection::vec(1usize..5, 1..4)
                .prop_flat_map(|shape| {
                    let len: usize = shape.iter().product();
                    let mode = 0..shape.len();
                    (
                        proptest::collection::vec(-10.0f64..10.0, len)
                            .prop_map(move |data| DenseTensor::from_vec(&shape, data).unwrap()),
                        mode,
                    )
                })
        }

        proptest! {
            #[test]
            fn unfold_fold_roundtrip_any_shape((t, mode) in tensor_strategy()) {
                let m = mode_unfold(&t, mode).unwrap();
                let back = mode_fold(&m, mode, t.shape()).unwrap();
                prop_assert_eq!(back.data(), t.data());
            }

            #[test]
            fn contract_scales_linearly((t, _) in tensor_strategy(), alpha in -5.0f64..5.0) {
                let modes: Vec<usize> = (0..t.ndim()).step_by(2).collect();
                let mut scaled = t.clone();
                scaled.scale(alpha);
                let base = contract_modes(&t, &t, &modes).unwrap();
                let lhs = contract_modes(&scaled, &t, &modes).unwrap();
                for (l, b) in lhs.data().iter().zip(base.data()) {
                    let want = alpha * b;
                    prop_assert!((l - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }
}
