//! Finegraining operators between grid resolutions: a sparse matrix P
//! mapping a coarse spatial dimension to a fine one, per scheme, plus the
//! weight-rescaling rule for continuous data and the operator norm used by
//! the convergence bound.

use crate::error::{Error, Result};
use crate::grid::{cell_centers, GridSpec};
use crate::tensor::{mode_fold, mode_unfold, DenseTensor, Matrix};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Each fine cell copies the coarse cell containing it; preserves
    /// outputs exactly for count-aggregated (one-hot) inputs.
    Nearest,
    /// Convex per-axis linear weights between the two nearest coarse
    /// centers; pairs with averaged continuous inputs.
    Multilinear,
}

/// Sparse fine x coarse interpolation matrix with a multiplicative scale
/// correction applied after mapping.
#[derive(Debug, Clone)]
pub struct InterpOperator {
    /// Nonzeros per fine row as (coarse column, weight).
    rows: Vec<Vec<(u32, f64)>>,
    coarse_dim: usize,
    pub scheme: Scheme,
    pub scale_correction: f64,
}

impl InterpOperator {
    pub fn fine_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_dim
    }

    /// Wraps an explicit dense matrix (used for convention fixtures).
    pub fn from_dense(m: &Matrix, scheme: Scheme, scale_correction: f64) -> Self {
        let rows = (0..m.rows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, v)| (c as u32, *v))
                    .collect()
            })
            .collect();
        InterpOperator { rows, coarse_dim: m.cols(), scheme, scale_correction }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.fine_dim(), self.coarse_dim);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m.set(r, c as usize, v);
            }
        }
        m
    }

    /// `P v` without the scale correction.
    pub fn apply_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.coarse_dim {
            return Err(Error::ShapeMismatch { mode: 0, left: v.len(), right: self.coarse_dim });
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|&(c, w)| w * v[c as usize]).sum())
            .collect())
    }

    /// `Pᵀ u` without the scale correction.
    pub fn apply_transpose_vec(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.fine_dim() {
            return Err(Error::ShapeMismatch { mode: 0, left: u.len(), right: self.fine_dim() });
        }
        let mut out = vec![0.0; self.coarse_dim];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                out[c as usize] += w * u[r];
            }
        }
        Ok(out)
    }
}

fn require_refinement(coarse: &GridSpec, fine: &GridSpec) -> Result<Vec<usize>> {
    coarse.refinement_ratios(fine)
}

/// Nearest-neighbor operator: fine cell -> containing coarse cell, scale 1.
pub fn build_nearest(coarse: &GridSpec, fine: &GridSpec) -> Result<InterpOperator> {
    let ratios = require_refinement(coarse, fine)?;
    let mut rows = Vec::with_capacity(fine.cell_count());
    for f in 0..fine.cell_count() {
        let fc = fine.cell_coords(f);
        let cc: Vec<usize> = fc.iter().zip(&ratios).map(|(&c, &r)| c / r).collect();
        rows.push(vec![(coarse.cell_index(&cc) as u32, 1.0)]);
    }
    Ok(InterpOperator {
        rows,
        coarse_dim: coarse.cell_count(),
        scheme: Scheme::Nearest,
        scale_correction: 1.0,
    })
}

/// Cell-centered multilinear operator. Each fine row is a convex
/// combination of the bracketing coarse centers per axis (boundary rows
/// clamp to the edge cell); the scale correction is the coarse/fine cell
/// count ratio so that averaged continuous inputs keep outputs roughly
/// unchanged.
pub fn build_multilinear(coarse: &GridSpec, fine: &GridSpec) -> Result<InterpOperator> {
    require_refinement(coarse, fine)?;
    let fine_centers = cell_centers(fine);
    let n_axes = coarse.n_axes();
    let mut rows = Vec::with_capacity(fine.cell_count());
    for center in &fine_centers {
        // Per-axis (coarse coord, weight) pairs, one or two entries each.
        let mut axis_weights: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_axes);
        for a in 0..n_axes {
            let (lo, hi) = coarse.extent[a];
            let d = coarse.dims[a];
            let w = (hi - lo) / d as f64;
            // Position in coarse-center coordinates: center i sits at u = i.
            let u = (center[a] - lo) / w - 0.5;
            let i0 = u.floor();
            if i0 < 0.0 {
                axis_weights.push(vec![(0, 1.0)]);
            } else if i0 as usize >= d - 1 {
                axis_weights.push(vec![(d - 1, 1.0)]);
            } else {
                let i = i0 as usize;
                let frac = u - i0;
                if frac == 0.0 {
                    axis_weights.push(vec![(i, 1.0)]);
                } else {
                    axis_weights.push(vec![(i, 1.0 - frac), (i + 1, frac)]);
                }
            }
        }
        // Tensor product of the per-axis weights.
        let mut entries: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
        for aw in &axis_weights {
            let mut next = Vec::with_capacity(entries.len() * aw.len());
            for (coords, wgt) in &entries {
                for &(i, awt) in aw {
                    let mut c = coords.clone();
                    c.push(i);
                    next.push((c, wgt * awt));
                }
            }
            entries = next;
        }
        let row: Vec<(u32, f64)> = entries
            .into_iter()
            .map(|(coords, wgt)| (coarse.cell_index(&coords) as u32, wgt))
            .collect();
        rows.push(row);
    }
    Ok(InterpOperator {
        rows,
        coarse_dim: coarse.cell_count(),
        scheme: Scheme::Multilinear,
        scale_correction: coarse.cell_count() as f64 / fine.cell_count() as f64,
    })
}

/// Node-convention linear prolongation for a 1D dyadic refinement:
/// `fine[2i+1] = c[i]`, `fine[2i] = (c[i-1] + c[i]) / 2` with a zero ghost
/// left of the boundary. For two coarse cells this is the Toeplitz matrix
/// `1/2 [[1,0],[2,0],[1,1],[0,2]]`.
pub fn build_node_linear_1d(coarse_n: usize) -> Result<InterpOperator> {
    if coarse_n == 0 {
        return Err(Error::InvalidArg("node-convention operator needs >= 1 coarse cell".into()));
    }
    let mut rows = Vec::with_capacity(2 * coarse_n);
    for f in 0..2 * coarse_n {
        if f % 2 == 1 {
            rows.push(vec![((f / 2) as u32, 1.0)]);
        } else {
            let i = f / 2;
            let mut row = Vec::new();
            if i > 0 {
                row.push(((i - 1) as u32, 0.5));
            }
            row.push((i as u32, 0.5));
            rows.push(row);
        }
    }
    Ok(InterpOperator {
        rows,
        coarse_dim: coarse_n,
        scheme: Scheme::Multilinear,
        scale_correction: 1.0,
    })
}

/// Applies one operator per spatial mode of a full weight tensor,
/// multiplying in each operator's scale correction. Non-spatial modes and
/// the bias are untouched by construction.
pub fn finegrain_full(w: &DenseTensor, ops: &[(usize, &InterpOperator)]) -> Result<DenseTensor> {
    let mut cur = w.clone();
    for &(mode, op) in ops {
        if mode >= cur.ndim() {
            return Err(Error::ModeOutOfRange { mode, ndim: cur.ndim() });
        }
        if cur.shape()[mode] != op.coarse_dim() {
            return Err(Error::ShapeMismatch {
                mode,
                left: cur.shape()[mode],
                right: op.coarse_dim(),
            });
        }
        let unf = mode_unfold(&cur, mode)?;
        let mut out = Matrix::zeros(op.fine_dim(), unf.cols());
        for (r, row) in op.rows.iter().enumerate() {
            let dst = out.row_mut(r);
            for &(c, wgt) in row {
                let src = unf.row(c as usize);
                let scaled = wgt * op.scale_correction;
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += scaled * s;
                }
            }
        }
        let mut shape = cur.shape().to_vec();
        shape[mode] = op.fine_dim();
        cur = mode_fold(&out, mode, &shape)?;
    }
    Ok(cur)
}

/// Refines one spatial factor matrix: `scale * (P C)`.
pub fn finegrain_factor(c: &Matrix, op: &InterpOperator) -> Result<Matrix> {
    if c.rows() != op.coarse_dim() {
        return Err(Error::ShapeMismatch { mode: 0, left: c.rows(), right: op.coarse_dim() });
    }
    let mut out = Matrix::zeros(op.fine_dim(), c.cols());
    for (r, row) in op.rows.iter().enumerate() {
        let dst = out.row_mut(r);
        for &(cc, wgt) in row {
            let src = c.row(cc as usize);
            let scaled = wgt * op.scale_correction;
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scaled * s;
            }
        }
    }
    Ok(out)
}

/// Largest singular value of P (scale correction excluded) by power
/// iteration on PᵀP: tolerance 1e-10, at most 10000 iterations.
pub fn operator_norm(op: &InterpOperator) -> Result<f64> {
    if op.fine_dim() == 0 || op.coarse_dim() == 0 {
        return Err(Error::InvalidArg("operator norm of an empty operator".into()));
    }
    let n = op.coarse_dim();
    // Fixed start vector; mildly uneven so it is not orthogonal to the
    // leading eigenvector in symmetric cases.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i % 7) as f64) / 7.0).collect();
    let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm0);

    let tol = 1e-10;
    let max_iters = 10_000;
    let mut lambda_prev = 0.0;
    for iter in 0..max_iters {
        let pu = op.apply_vec(&v)?;
        let mut w = op.apply_transpose_vec(&pu)?;
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|x| *x /= wn);
        if iter > 0 && (lambda - lambda_prev).abs() <= tol * lambda.abs().max(1.0) {
            return Ok(lambda.max(0.0).sqrt());
        }
        lambda_prev = lambda;
        v = w;
    }
    Err(Error::Convergence {
        context: "operator norm power iteration".into(),
        iters: max_iters,
        residual: lambda_prev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid1d(n: usize) -> GridSpec {
        GridSpec::unit(vec![n]).unwrap()
    }

    #[test]
    fn nearest_identity_when_equal() {
        let g = grid1d(3);
        let op = build_nearest(&g, &g).unwrap();
        let d = op.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(op.scale_correction, 1.0);
    }

    #[test]
    fn nearest_1d_dyadic_rows() {
        let op = build_nearest(&grid1d(2), &grid1d(4)).unwrap();
        let d = op.to_dense();
        let want = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_eq!(d.get(r, c), *v);
            }
        }
    }

    #[test]
    fn nearest_2d_block_replication() {
        let coarse = GridSpec::unit(vec![2, 2]).unwrap();
        let fine = GridSpec::unit(vec![4, 4]).unwrap();
        let op = build_nearest(&coarse, &fine).unwrap();
        for f in 0..16 {
            let fc = fine.cell_coords(f);
            let expect = coarse.cell_index(&[fc[0] / 2, fc[1] / 2]);
            assert_eq!(op.rows[f], vec![(expect as u32, 1.0)]);
        }
    }

    #[test]
    fn nearest_rejects_non_refining() {
        assert!(build_nearest(&grid1d(3), &grid1d(4)).is_err());
    }

    #[test]
    fn multilinear_1d_dyadic_weights() {
        let op = build_multilinear(&grid1d(2), &grid1d(4)).unwrap();
        let d = op.to_dense();
        let want = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((d.get(r, c) - v).abs() < 1e-12, "({r},{c})");
            }
        }
        assert!((op.scale_correction - 0.5).abs() < 1e-15);
    }

    #[test]
    fn multilinear_identity_when_equal() {
        let g = GridSpec::unit(vec![3, 2]).unwrap();
        let op = build_multilinear(&g, &g).unwrap();
        let d = op.to_dense();
        for i in 0..6 {
            for j in 0..6 {
                assert!((d.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert_eq!(op.scale_correction, 1.0);
    }

    #[test]
    fn multilinear_rows_are_convex() {
        let coarse = GridSpec::unit(vec![3, 4]).unwrap();
        let fine = GridSpec::unit(vec![6, 8]).unwrap();
        let op = build_multilinear(&coarse, &fine).unwrap();
        for row in &op.rows {
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&(_, w)| w >= 0.0));
        }
    }

    #[test]
    fn node_convention_matches_paper_toeplitz() {
        let op = build_node_linear_1d(2).unwrap();
        let d = op.to_dense();
        let want = [[0.5, 0.0], [1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_eq!(d.get(r, c), *v, "({r},{c})");
            }
        }
        // P w = [w1/2, w1, w1/2 + w2/2, w2].
        let mapped = op.apply_vec(&[3.0, 5.0]).unwrap();
        assert_eq!(mapped, vec![1.5, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn finegrain_identity_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid1d(4);
        let op = build_nearest(&g, &g).unwrap();
        let w = DenseTensor::from_vec(&[2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = finegrain_full(&w, &[(2, &op)]).unwrap();
        assert_eq!(out.data(), w.data());
    }

    #[test]
    fn finegrain_constant_multilinear_scales() {
        let op = build_multilinear(&grid1d(2), &grid1d(4)).unwrap();
        let w = DenseTensor::from_vec(&[2, 2], vec![3.0; 4]).unwrap();
        let out = finegrain_full(&w, &[(1, &op)]).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        for &v in out.data() {
            assert!((v - 3.0 * op.scale_correction).abs() < 1e-12);
        }
    }

    #[test]
    fn finegrain_nearest_duplicates_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = build_nearest(&grid1d(2), &grid1d(4)).unwrap();
        let w = DenseTensor::from_vec(&[3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = finegrain_full(&w, &[(1, &op)]).unwrap();
        for i in 0..3 {
            for d in 0..4 {
                assert_eq!(out.get(&[i, d]), w.get(&[i, d / 2]));
            }
        }
    }

    #[test]
    fn finegrain_factor_applies_scale() {
        let op = build_multilinear(&grid1d(2), &grid1d(4)).unwrap();
        let c = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = finegrain_factor(&c, &op).unwrap();
        assert_eq!((out.rows(), out.cols()), (4, 2));
        // Row 1 = 0.75*c0 + 0.25*c1, scaled by 1/2.
        assert!((out.get(1, 0) - 0.5 * (0.75 * 1.0 + 0.25 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn operator_norm_identity_is_one() {
        let g = grid1d(5);
        let op = build_nearest(&g, &g).unwrap();
        assert!((operator_norm(&op).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn operator_norm_nearest_dyadic_sqrt2() {
        let op = build_nearest(&grid1d(2), &grid1d(4)).unwrap();
        // PᵀP = 2I, so the norm is exactly sqrt(2).
        assert!((operator_norm(&op).unwrap() - 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn operator_norm_matches_dense_svd_oracle() {
        // Dense oracle for a fine x 2 operator: the top singular value is
        // the larger eigenvalue of the 2x2 Gram matrix, in closed form.
        let op = build_node_linear_1d(2).unwrap();
        let p = op.to_dense();
        let g = p.transpose().matmul(&p).unwrap();
        let (a, b, c) = (g.get(0, 0), g.get(0, 1), g.get(1, 1));
        let lam_max = 0.5 * (a + c + ((a - c) * (a - c) + 4.0 * b * b).sqrt());
        let want = lam_max.sqrt();
        assert!((operator_norm(&op).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn operator_norm_at_least_one_on_refinements() {
        let coarse = GridSpec::unit(vec![2, 3]).unwrap();
        let fine = GridSpec::unit(vec![4, 6]).unwrap();
        for op in [build_nearest(&coarse, &fine).unwrap(), build_multilinear(&coarse, &fine).unwrap()] {
            assert!(operator_norm(&op).unwrap() >= 1.0 - 1e-9);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scheme_row_structure(
                base in proptest::collection::vec(1usize..4, 1..3),
                ratios in proptest::collection::vec(1usize..4, 1..3),
            ) {
                let n = base.len().min(ratios.len());
                let coarse_dims: Vec<usize> = base[..n].to_vec();
                let fine_dims: Vec<usize> =
                    coarse_dims.iter().zip(&ratios[..n]).map(|(c, r)| c * r).collect();
                let coarse = GridSpec::unit(coarse_dims).unwrap();
                let fine = GridSpec::unit(fine_dims).unwrap();

                let near = build_nearest(&coarse, &fine).unwrap();
                let d = near.to_dense();
                for r in 0..d.rows() {
                    let ones = d.row(r).iter().filter(|&&v| v == 1.0).count();
                    let zeros = d.row(r).iter().filter(|&&v| v == 0.0).count();
                    prop_assert_eq!(ones, 1);
                    prop_assert_eq!(zeros, d.cols() - 1);
                }

                let multi = build_multilinear(&coarse, &fine).unwrap();
                let d = multi.to_dense();
                for r in 0..d.rows() {
                    let sum: f64 = d.row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                    prop_assert!(d.row(r).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
