//! Spatial RBF regularization and the combined training objective.
//!
//! The spatial penalty couples weight slices at nearby locations through a
//! precomputed kernel; its gradient is evaluated in closed form via the
//! equivalent graph-Laplacian quadratic, which costs one kernel matvec
//! instead of a double loop over location pairs.

use crate::error::{Error, Result};
use crate::grid::{normalized_distances, GridSpec};
use crate::tensor::{mode_fold, mode_unfold, DenseTensor, Matrix};
use serde::{Deserialize, Serialize};

/// Dense symmetric location-affinity kernel for one spatial mode at one
/// resolution. Unit diagonal; off-diagonal entries in (0, 1].
#[derive(Debug, Clone)]
pub struct SpatialKernel {
    matrix: Matrix,
    sigma: f64,
    /// Off-diagonal nonzeros per row, for the matvec.
    neighbors: Vec<Vec<(u32, f64)>>,
    /// Off-diagonal row sums.
    row_sums: Vec<f64>,
}

impl SpatialKernel {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn entry(&self, d: usize, d2: usize) -> f64 {
        self.matrix.get(d, d2)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Regularization settings; `lambda_r` scales the whole penalty, the two
/// weights mix the spatial and L2 parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub lambda_r: f64,
    pub l2_weight: f64,
    pub spatial_weight: f64,
    pub sigma: f64,
    /// Kernel entries strictly below this are zeroed (0 disables).
    pub sparsify_below: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda_r: 1e-4,
            l2_weight: 1.0,
            spatial_weight: 1.0,
            sigma: 0.1,
            sparsify_below: 0.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_r < 0.0 || self.l2_weight < 0.0 || self.spatial_weight < 0.0 {
            return Err(Error::InvalidArg("regularization coefficients must be nonnegative".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidArg(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.sparsify_below) {
            return Err(Error::InvalidArg("sparsify_below must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Builds `K[d,d'] = exp(-dist(d,d')^2 / sigma)` over normalized center
/// distances, zeroing entries below `sparsify_below`.
pub fn build_rbf_kernel(g: &GridSpec, sigma: f64, sparsify_below: f64) -> Result<SpatialKernel> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArg(format!("sigma must be positive, got {sigma}")));
    }
    let dist = normalized_distances(g);
    let n = dist.rows();
    let mut matrix = Matrix::zeros(n, n);
    let mut neighbors = vec![Vec::new(); n];
    let mut row_sums = vec![0.0; n];
    for d in 0..n {
        matrix.set(d, d, 1.0);
        for d2 in 0..n {
            if d2 == d {
                continue;
            }
            let r = dist.get(d, d2);
            let mut k = (-r * r / sigma).exp();
            if k < sparsify_below {
                k = 0.0;
            }
            if k != 0.0 {
                matrix.set(d, d2, k);
                neighbors[d].push((d2 as u32, k));
                row_sums[d] += k;
            }
        }
    }
    Ok(SpatialKernel { matrix, sigma, neighbors, row_sums })
}

/// Spatial penalty `R_s = Σ_d Σ_d' K[d,d'] ||W_d - W_d'||_F^2` over slices
/// along `spatial_mode`, with its closed-form gradient
/// `4 Σ_d' K[d,d'] (W_d - W_d')`.
pub fn spatial_reg(
    w: &DenseTensor,
    spatial_mode: usize,
    kernel: &SpatialKernel,
) -> Result<(f64, DenseTensor)> {
    let unfolded = mode_unfold(w, spatial_mode)?;
    if unfolded.rows() != kernel.dim() {
        return Err(Error::ShapeMismatch {
            mode: spatial_mode,
            left: unfolded.rows(),
            right: kernel.dim(),
        });
    }
    let (value, grad_unf) = spatial_reg_rows(&unfolded, kernel);
    let grad = mode_fold(&grad_unf, spatial_mode, w.shape())?;
    Ok((value, grad))
}

/// Same penalty for a factor matrix whose rows index locations.
pub fn spatial_reg_matrix(c: &Matrix, kernel: &SpatialKernel) -> Result<(f64, Matrix)> {
    if c.rows() != kernel.dim() {
        return Err(Error::ShapeMismatch { mode: 0, left: c.rows(), right: kernel.dim() });
    }
    Ok(spatial_reg_rows(c, kernel))
}

fn spatial_reg_rows(v: &Matrix, kernel: &SpatialKernel) -> (f64, Matrix) {
    let d = v.rows();
    let j = v.cols();
    // m[d] = Σ_d' K[d,d'] v[d']  (off-diagonal part).
    let mut m = Matrix::zeros(d, j);
    for row in 0..d {
        let out = m.row_mut(row);
        for &(col, k) in &kernel.neighbors[row] {
            let src = &v.data()[col as usize * j..(col as usize + 1) * j];
            for (o, s) in out.iter_mut().zip(src) {
                *o += k * s;
            }
        }
    }
    // R_s = 2 Σ_d (S_d v_d - m_d) · v_d, gradient 4 (S_d v_d - m_d).
    let mut value = 0.0;
    let mut grad = Matrix::zeros(d, j);
    for row in 0..d {
        let s = kernel.row_sums[row];
        let vr = v.row(row);
        let mr = m.row(row);
        let gr = grad.row_mut(row);
        for ((g, &vv), &mm) in gr.iter_mut().zip(vr).zip(mr) {
            let l = s * vv - mm;
            value += l * vv;
            *g = 4.0 * l;
        }
    }
    (2.0 * value, grad)
}

/// L2 penalty `||v||^2` with gradient `2 v`.
pub fn l2_reg(values: &[f64]) -> (f64, Vec<f64>) {
    let value = values.iter().map(|v| v * v).sum();
    let grad = values.iter().map(|v| 2.0 * v).collect();
    (value, grad)
}

/// Regularization target: either the full weight tensor with its spatial
/// modes, or the low-rank factor matrices with the spatial ones flagged.
pub enum RegTarget<'a> {
    Full { w: &'a DenseTensor, spatial_modes: &'a [usize] },
    Factors { factors: &'a [Matrix], spatial: &'a [usize] },
}

/// Gradient blocks matching a [`RegTarget`].
#[derive(Debug, Clone)]
pub enum RegGrads {
    Full(DenseTensor),
    Factors(Vec<Matrix>),
}

/// Combined objective `loss + lambda_r (spatial_weight R_s + l2_weight ||params||^2)`.
///
/// Returns the objective value and the regularization gradient blocks; the
/// caller adds them to the data-loss gradient. Bias terms are regularized
/// by neither penalty. For the low-rank target, the spatial penalty is
/// applied to the spatial factor matrices and L2 to every factor.
pub fn objective(
    loss: f64,
    target: RegTarget,
    cfg: &RegConfig,
    kernels: &[SpatialKernel],
) -> Result<(f64, RegGrads)> {
    cfg.validate()?;
    match target {
        RegTarget::Full { w, spatial_modes } => {
            if cfg.lambda_r == 0.0 {
                return Ok((loss, RegGrads::Full(DenseTensor::zeros(w.shape()))));
            }
            if spatial_modes.len() != kernels.len() {
                return Err(Error::InvalidArg(format!(
                    "{} spatial modes but {} kernels",
                    spatial_modes.len(),
                    kernels.len()
                )));
            }
            let mut reg_value = 0.0;
            let mut grad = DenseTensor::zeros(w.shape());
            if cfg.spatial_weight > 0.0 {
                for (&mode, kernel) in spatial_modes.iter().zip(kernels) {
                    let (v, g) = spatial_reg(w, mode, kernel)?;
                    reg_value += cfg.spatial_weight * v;
                    for (acc, gv) in grad.data_mut().iter_mut().zip(g.data()) {
                        *acc += cfg.lambda_r * cfg.spatial_weight * gv;
                    }
                }
            }
            if cfg.l2_weight > 0.0 {
                let (v, g) = l2_reg(w.data());
                reg_value += cfg.l2_weight * v;
                for (acc, gv) in grad.data_mut().iter_mut().zip(&g) {
                    *acc += cfg.lambda_r * cfg.l2_weight * gv;
                }
            }
            Ok((loss + cfg.lambda_r * reg_value, RegGrads::Full(grad)))
        }
        RegTarget::Factors { factors, spatial } => {
            let mut grads: Vec<Matrix> =
                factors.iter().map(|f| Matrix::zeros(f.rows(), f.cols())).collect();
            if cfg.lambda_r == 0.0 {
                return Ok((loss, RegGrads::Factors(grads)));
            }
            if spatial.len() != kernels.len() {
                return Err(Error::InvalidArg(format!(
                    "{} spatial factors but {} kernels",
                    spatial.len(),
                    kernels.len()
                )));
            }
            let mut reg_value = 0.0;
            if cfg.spatial_weight > 0.0 {
                for (&fi, kernel) in spatial.iter().zip(kernels) {
                    let (v, g) = spatial_reg_matrix(&factors[fi], kernel)?;
                    reg_value += cfg.spatial_weight * v;
                    for (acc, gv) in grads[fi].data_mut().iter_mut().zip(g.data()) {
                        *acc += cfg.lambda_r * cfg.spatial_weight * gv;
                    }
                }
            }
            if cfg.l2_weight > 0.0 {
                for (f, grad) in factors.iter().zip(&mut grads) {
                    let (v, g) = l2_reg(f.data());
                    reg_value += cfg.l2_weight * v;
                    for (acc, gv) in grad.data_mut().iter_mut().zip(&g) {
                        *acc += cfg.lambda_r * cfg.l2_weight * gv;
                    }
                }
            }
            Ok((loss + cfg.lambda_r * reg_value, RegGrads::Factors(grads)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_diagonal_is_one() {
        let g = GridSpec::unit(vec![3, 3]).unwrap();
        let k = build_rbf_kernel(&g, 0.2, 0.0).unwrap();
        for d in 0..9 {
            assert_eq!(k.entry(d, d), 1.0);
        }
    }

    #[test]
    fn kernel_closed_form_at_unit_distance() {
        // Normalized distance 1 with sigma 1 gives e^{-1}. Construct a 1D
        // two-cell grid: centers 0.25/0.75 -> distance 0.5; rescale sigma so
        // the exponent is -1.
        let g = GridSpec::unit(vec![2]).unwrap();
        let k = build_rbf_kernel(&g, 0.25, 0.0).unwrap();
        assert!((k.entry(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_matches_scalar_oracle() {
        let g = GridSpec::unit(vec![3]).unwrap();
        let sigma = 0.5;
        let k = build_rbf_kernel(&g, sigma, 0.0).unwrap();
        let dist = normalized_distances(&g);
        for d in 0..3 {
            for d2 in 0..3 {
                let want = (-dist.get(d, d2).powi(2) / sigma).exp();
                assert!((k.entry(d, d2) - want).abs() < 1e-15, "({d},{d2})");
            }
        }
    }

    #[test]
    fn kernel_symmetric_after_sparsify() {
        let g = GridSpec::unit(vec![4, 4]).unwrap();
        let k = build_rbf_kernel(&g, 0.05, 0.01).unwrap();
        for d in 0..16 {
            assert_eq!(k.entry(d, d), 1.0);
            for d2 in 0..16 {
                assert_eq!(k.entry(d, d2), k.entry(d2, d));
            }
        }
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let g = GridSpec::unit(vec![2]).unwrap();
        assert!(build_rbf_kernel(&g, 0.0, 0.0).is_err());
        assert!(build_rbf_kernel(&g, -1.0, 0.0).is_err());
    }

    #[test]
    fn constant_slices_give_zero_penalty() {
        let g = GridSpec::unit(vec![2, 2]).unwrap();
        let k = build_rbf_kernel(&g, 0.1, 0.0).unwrap();
        // W: 2x3x4 with spatial mode 2 (4 cells), constant along it.
        let mut w = DenseTensor::zeros(&[2, 3, 4]);
        for i in 0..2 {
            for f in 0..3 {
                for d in 0..4 {
                    w.set(&[i, f, d], (i * 3 + f) as f64);
                }
            }
        }
        let (value, grad) = spatial_reg(&w, 2, &k).unwrap();
        assert!(value.abs() < 1e-12);
        assert!(grad.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn two_location_penalty_expands_by_hand() {
        // Two locations with kernel weight k and slices differing by
        // Frobenius distance f: the double sum counts the pair twice,
        // giving 2 k f^2.
        let g = GridSpec::unit(vec![2]).unwrap();
        let kernel = build_rbf_kernel(&g, 0.3, 0.0).unwrap();
        let kv = kernel.entry(0, 1);
        let w = DenseTensor::from_vec(&[2, 2], vec![1.0, 2.0, 4.0, 6.0]).unwrap();
        // Slices over mode 0... use spatial mode 1 so slices are columns:
        // col0 = (1,4), col1 = (2,6), f^2 = 1 + 4 = 5.
        let (value, _) = spatial_reg(&w, 1, &kernel).unwrap();
        assert!((value - 2.0 * kv * 5.0).abs() < 1e-12, "value {value}");
    }

    /// Central finite differences on the spatial penalty.
    fn fd_spatial(w: &DenseTensor, mode: usize, k: &SpatialKernel, idx: usize) -> f64 {
        let h = 1e-5;
        let mut plus = w.clone();
        plus.data_mut()[idx] += h;
        let mut minus = w.clone();
        minus.data_mut()[idx] -= h;
        let (vp, _) = spatial_reg(&plus, mode, k).unwrap();
        let (vm, _) = spatial_reg(&minus, mode, k).unwrap();
        (vp - vm) / (2.0 * h)
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = GridSpec::unit(vec![2, 2]).unwrap();
        let kernel = build_rbf_kernel(&g, 0.2, 0.0).unwrap();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = DenseTensor::from_vec(&[2, 3, 4], data).unwrap();
        let (_, grad) = spatial_reg(&w, 2, &kernel).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for idx in 0..w.len() {
            let fd = fd_spatial(&w, 2, &kernel, idx);
            num += (fd - grad.data()[idx]).powi(2);
            den += fd.powi(2).max(grad.data()[idx].powi(2));
        }
        assert!(num.sqrt() <= 1e-6 * den.sqrt().max(1.0), "rel err {}", num.sqrt() / den.sqrt());
    }

    #[test]
    fn objective_disabled_regularizer() {
        let w = DenseTensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = RegConfig { lambda_r: 0.0, ..Default::default() };
        let (value, grads) = objective(
            0.75,
            RegTarget::Full { w: &w, spatial_modes: &[] },
            &cfg,
            &[],
        )
        .unwrap();
        assert_eq!(value, 0.75);
        match grads {
            RegGrads::Full(g) => assert!(g.data().iter().all(|&v| v == 0.0)),
            _ => panic!("wrong grad kind"),
        }
    }

    #[test]
    fn objective_pure_l2() {
        let v = DenseTensor::from_vec(&[3], vec![1.0, -2.0, 2.0]).unwrap();
        let cfg = RegConfig {
            lambda_r: 0.5,
            l2_weight: 2.0,
            spatial_weight: 0.0,
            ..Default::default()
        };
        let (value, _) =
            objective(0.0, RegTarget::Full { w: &v, spatial_modes: &[] }, &cfg, &[]).unwrap();
        // lambda_r * l2_weight * ||v||^2 = 0.5 * 2 * 9.
        assert!((value - 9.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_penalty_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = GridSpec::unit(vec![3]).unwrap();
        let kernel = build_rbf_kernel(&g, 0.2, 0.0).unwrap();
        for _ in 0..20 {
            let data: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w = DenseTensor::from_vec(&[2, 3], data).unwrap();
            let (value, _) = spatial_reg(&w, 1, &kernel).unwrap();
            assert!(value >= -1e-12);
        }
    }
}
