//! CP decomposition by alternating least squares, used once to hand the
//! trained full-rank tensor off to the low-rank stage.

use crate::error::{Error, Result};
use crate::tensor::{cp_reconstruct, khatri_rao, mode_unfold, DenseTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// CP representation: one factor matrix per mode plus per-component scales.
/// After normalization every factor column has unit 2-norm and `lambdas`
/// carry the magnitudes.
#[derive(Debug, Clone)]
pub struct CpFactors {
    pub factors: Vec<Matrix>,
    pub lambdas: Vec<f64>,
}

impl CpFactors {
    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        cp_reconstruct(&self.factors, &self.lambdas)
    }

    /// Moves column norms into `lambdas`, leaving unit-norm columns.
    pub fn normalize(&mut self) {
        let k = self.rank();
        for kk in 0..k {
            let mut scale = self.lambdas[kk];
            for f in &mut self.factors {
                let mut norm = 0.0;
                for r in 0..f.rows() {
                    norm += f.get(r, kk) * f.get(r, kk);
                }
                let norm = norm.sqrt();
                if norm > 0.0 {
                    for r in 0..f.rows() {
                        let v = f.get(r, kk) / norm;
                        f.set(r, kk, v);
                    }
                }
                scale *= norm;
            }
            self.lambdas[kk] = scale;
        }
    }

    /// Distributes each lambda evenly over the modes (`lambda^(1/N)` per
    /// factor) and returns plain factor matrices; the trainer optimizes
    /// these directly.
    pub fn absorb_lambdas(&self) -> Vec<Matrix> {
        let n = self.factors.len() as f64;
        let mut out = self.factors.clone();
        for (kk, &lam) in self.lambdas.iter().enumerate() {
            let s = lam.max(0.0).powf(1.0 / n);
            for f in &mut out {
                for r in 0..f.rows() {
                    let v = f.get(r, kk) * s;
                    f.set(r, kk, v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlsConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop when the relative fit change drops below this.
    pub fit_tol: f64,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig { rank: 5, max_iters: 200, fit_tol: 1e-8, seed: 0 }
    }
}

const GRAM_RIDGE: f64 = 1e-10;

/// Solves the symmetric K x K system `H x = b` for each right-hand side row
/// of `rhs` (rhs is n x K, solving `H xᵀ = rhsᵀ` column-wise). Gaussian
/// elimination with partial pivoting; K is small.
fn solve_gram(h: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let k = h.rows();
    let n = rhs.rows();
    let mut a = h.clone();
    let mut b = rhs.transpose(); // k x n
    for col in 0..k {
        let mut pivot = col;
        let mut best = a.get(col, col).abs();
        for r in col + 1..k {
            let v = a.get(r, col).abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return Err(Error::InvalidArg("singular Gram matrix in ALS solve".into()));
        }
        if pivot != col {
            for c in 0..k {
                let tmp = a.get(col, c);
                a.set(col, c, a.get(pivot, c));
                a.set(pivot, c, tmp);
            }
            for c in 0..n {
                let tmp = b.get(col, c);
                b.set(col, c, b.get(pivot, c));
                b.set(pivot, c, tmp);
            }
        }
        let d = a.get(col, col);
        for r in col + 1..k {
            let factor = a.get(r, col) / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..k {
                let v = a.get(r, c) - factor * a.get(col, c);
                a.set(r, c, v);
            }
            for c in 0..n {
                let v = b.get(r, c) - factor * b.get(col, c);
                b.set(r, c, v);
            }
        }
    }
    for col in (0..k).rev() {
        let d = a.get(col, col);
        for c in 0..n {
            let mut v = b.get(col, c);
            for r in col + 1..k {
                v -= a.get(col, r) * b.get(r, c);
            }
            b.set(col, c, v / d);
        }
    }
    Ok(b.transpose())
}

/// Alternating least squares: per mode, solve the unfolded tensor against
/// the Khatri-Rao product of the other factors through the Gram normal
/// equations (ridge 1e-10). Deterministic given the seed; a zero tensor
/// returns zero factors with fit 1 by convention.
pub fn cp_als(w: &DenseTensor, cfg: &AlsConfig) -> Result<(CpFactors, f64)> {
    let k = cfg.rank;
    if k < 1 {
        return Err(Error::InvalidArg("rank must be >= 1".into()));
    }
    if cfg.fit_tol <= 0.0 {
        return Err(Error::InvalidArg("fit_tol must be positive".into()));
    }
    let ndim = w.ndim();
    if ndim < 2 {
        return Err(Error::InvalidArg("cp_als needs at least 2 modes".into()));
    }
    let total: usize = w.shape().iter().product();
    for (mode, &sz) in w.shape().iter().enumerate() {
        let others = total / sz;
        if k > others {
            return Err(Error::InvalidArg(format!(
                "rank {k} infeasible: mode {mode} leaves only {others} equations"
            )));
        }
    }

    let norm_w = w.frobenius_norm();
    if norm_w == 0.0 {
        let factors = w.shape().iter().map(|&n| Matrix::zeros(n, k)).collect();
        return Ok((CpFactors { factors, lambdas: vec![0.0; k] }, 1.0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut factors: Vec<Matrix> = w
        .shape()
        .iter()
        .map(|&n| {
            let mut m = Matrix::zeros(n, k);
            for c in 0..k {
                let mut col: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                col.iter_mut().for_each(|v| *v /= norm);
                for (r, v) in col.iter().enumerate() {
                    m.set(r, c, *v);
                }
            }
            m
        })
        .collect();
    let mut lambdas = vec![1.0; k];

    let unfoldings: Vec<Matrix> = (0..ndim).map(|n| mode_unfold(w, n)).collect::<Result<_>>()?;
    let mut fit = 0.0;
    for iter in 0..cfg.max_iters {
        let fit_old = fit;
        for n in 0..ndim {
            let others: Vec<&Matrix> =
                (0..ndim).filter(|&m| m != n).map(|m| &factors[m]).collect();
            let kr = khatri_rao(&others)?;
            let mttkrp = unfoldings[n].matmul(&kr)?;
            // Hadamard product of the other factors' Grams, plus ridge.
            let mut h = Matrix::from_vec(k, k, vec![1.0; k * k])?;
            for f in &others {
                let g = f.gram();
                for (hv, gv) in h.data_mut().iter_mut().zip(g.data()) {
                    *hv *= gv;
                }
            }
            for d in 0..k {
                let v = h.get(d, d) + GRAM_RIDGE;
                h.set(d, d, v);
            }
            let mut updated = solve_gram(&h, &mttkrp)?;
            // Column norms into lambdas, columns to unit norm.
            let norms = updated.col_norms();
            for (c, &nv) in norms.iter().enumerate() {
                if nv > 0.0 {
                    for r in 0..updated.rows() {
                        let v = updated.get(r, c) / nv;
                        updated.set(r, c, v);
                    }
                }
            }
            lambdas = norms;
            factors[n] = updated;
        }
        let est = cp_reconstruct(&factors, &lambdas)?;
        let mut res = 0.0;
        for (a, b) in w.data().iter().zip(est.data()) {
            res += (a - b) * (a - b);
        }
        fit = 1.0 - res.sqrt() / norm_w;
        if iter > 0 && (fit - fit_old).abs() < cfg.fit_tol {
            break;
        }
    }
    Ok((CpFactors { factors, lambdas }, fit))
}

/// Flips each factor column so its largest-magnitude entry is positive;
/// returns the net flip applied to component `k` (+1 or -1 per mode,
/// multiplied together).
fn canonical_signs(factors: &mut [Matrix]) -> Vec<f64> {
    let k = factors[0].cols();
    let mut net = vec![1.0; k];
    for f in factors.iter_mut() {
        for c in 0..k {
            let mut best = 0.0f64;
            let mut sign = 1.0;
            for r in 0..f.rows() {
                let v = f.get(r, c);
                if v.abs() > best {
                    best = v.abs();
                    sign = if v >= 0.0 { 1.0 } else { -1.0 };
                }
            }
            if sign < 0.0 {
                net[c] = -net[c];
                for r in 0..f.rows() {
                    let v = -f.get(r, c);
                    f.set(r, c, v);
                }
            }
        }
    }
    net
}

fn unit_columns(factors: &mut [Matrix]) {
    for f in factors.iter_mut() {
        let norms = f.col_norms();
        for (c, &nv) in norms.iter().enumerate() {
            if nv > 0.0 {
                for r in 0..f.rows() {
                    let v = f.get(r, c) / nv;
                    f.set(r, c, v);
                }
            }
        }
    }
}

/// Greedy component matching between an estimated and a reference CP
/// decomposition, invariant to component permutation and per-mode sign and
/// scale indeterminacy. Columns are unit-normalized and sign-canonicalized
/// per mode, then components are matched by the absolute cosine of their
/// concatenated columns.
///
/// Returns (permutation mapping est component -> truth component, relative
/// sign per matched pair, mean matched similarity in [0, 1]).
pub fn align_factors(est: &CpFactors, truth: &CpFactors) -> Result<(Vec<usize>, Vec<f64>, f64)> {
    if est.rank() != truth.rank() {
        return Err(Error::RankMismatch { expected: truth.rank(), found: est.rank() });
    }
    if est.factors.len() != truth.factors.len() {
        return Err(Error::InvalidArg("mode count mismatch".into()));
    }
    for (a, b) in est.factors.iter().zip(&truth.factors) {
        if a.rows() != b.rows() {
            return Err(Error::ShapeMismatch { mode: 0, left: a.rows(), right: b.rows() });
        }
    }
    let k = est.rank();
    let mut ef = est.factors.clone();
    let mut tf = truth.factors.clone();
    unit_columns(&mut ef);
    unit_columns(&mut tf);
    let e_net = canonical_signs(&mut ef);
    let t_net = canonical_signs(&mut tf);

    let concat = |fs: &[Matrix], c: usize| -> Vec<f64> {
        let mut v = Vec::new();
        for f in fs {
            for r in 0..f.rows() {
                v.push(f.get(r, c));
            }
        }
        v
    };

    let mut sims = vec![vec![0.0; k]; k];
    for i in 0..k {
        let ei = concat(&ef, i);
        let en: f64 = ei.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..k {
            let tj = concat(&tf, j);
            let tn: f64 = tj.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = ei.iter().zip(&tj).map(|(a, b)| a * b).sum();
            sims[i][j] = if en > 0.0 && tn > 0.0 { dot / (en * tn) } else { 0.0 };
        }
    }

    let mut perm = vec![usize::MAX; k];
    let mut signs = vec![1.0; k];
    let mut used_e = vec![false; k];
    let mut used_t = vec![false; k];
    let mut score = 0.0;
    for _ in 0..k {
        let mut best = (-1.0, 0, 0);
        for i in 0..k {
            if used_e[i] {
                continue;
            }
            for j in 0..k {
                if used_t[j] {
                    continue;
                }
                if sims[i][j].abs() > best.0 {
                    best = (sims[i][j].abs(), i, j);
                }
            }
        }
        let (s, i, j) = best;
        used_e[i] = true;
        used_t[j] = true;
        perm[i] = j;
        signs[i] = if sims[i][j] >= 0.0 { 1.0 } else { -1.0 } * e_net[i] * t_net[j];
        score += s;
    }
    Ok((perm, signs, score / k as f64))
}
