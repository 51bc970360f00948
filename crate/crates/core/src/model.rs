//! Full-rank and low-rank tensor models: forward passes, task losses and
//! analytic parameter gradients.
//!
//! The weight tensor is laid out `(outputs, features, spatial...)` and a
//! batch input `(samples, features, spatial...)` is shared across outputs.
//! The low-rank forward contracts the input against the spatial factors
//! first, then the feature and output factors, and never materializes the
//! full weight tensor.

use crate::error::{Error, Result};
use crate::parallel::chunked_reduce;
use crate::tensor::{cp_reconstruct, DenseTensor, Matrix};
use serde::{Deserialize, Serialize};

pub const PRED_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Classification head; outputs clamped inside (0, 1).
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let p = 1.0 / (1.0 + (-z).exp());
                p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
            }
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activated value.
    #[inline]
    pub fn derivative_from_output(&self, pred: f64) -> f64 {
        match self {
            Activation::Sigmoid => pred * (1.0 - pred),
            Activation::Identity => 1.0,
        }
    }
}

/// Task loss attached to a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Cross entropy with the positive term scaled by `beta`
    /// (negatives/positives ratio). `beta_on_both` reproduces the variant
    /// that scales both terms.
    WeightedCe {
        beta: f64,
        #[serde(default)]
        beta_on_both: bool,
    },
    Mse,
}

/// Class-imbalance weight: exact ratio of negative to positive labels.
pub fn beta_from_labels(y: &[f64]) -> Result<f64> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    for &v in y {
        if v == 1.0 {
            pos += 1;
        } else if v == 0.0 {
            neg += 1;
        } else {
            return Err(Error::InvalidArg(format!("label {v} outside {{0,1}}")));
        }
    }
    if pos == 0 {
        return Err(Error::InvalidArg("no positive labels; beta undefined".into()));
    }
    Ok(neg as f64 / pos as f64)
}

/// One batch: inputs with a leading sample mode, labels row-major over
/// `(sample, output)`, optional per-sample weights.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: DenseTensor,
    pub y: Vec<f64>,
    pub sample_weights: Option<Vec<f64>>,
    pub n_outputs: usize,
}

impl Batch {
    pub fn new(
        x: DenseTensor,
        y: Vec<f64>,
        sample_weights: Option<Vec<f64>>,
        n_outputs: usize,
    ) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if y.len() != n * n_outputs {
            return Err(Error::InvalidArg(format!(
                "{} labels for {} samples x {} outputs",
                y.len(),
                n,
                n_outputs
            )));
        }
        if let Some(w) = &sample_weights {
            if w.len() != n {
                return Err(Error::InvalidArg(format!(
                    "{} sample weights for {} samples",
                    w.len(),
                    n
                )));
            }
        }
        Ok(Batch { x, y, sample_weights, n_outputs })
    }

    pub fn n_samples(&self) -> usize {
        self.x.shape().first().copied().unwrap_or(0)
    }

    /// Flattened per-sample input length (features x spatial cells).
    pub fn sample_len(&self) -> usize {
        self.x.shape()[1..].iter().product()
    }
}

/// Dense weight tensor `(outputs, features, spatial...)` plus per-output
/// bias.
#[derive(Debug, Clone)]
pub struct FullRankModel {
    pub w: DenseTensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Number of trailing spatial modes of `w`.
    pub n_spatial: usize,
}

impl FullRankModel {
    pub fn new(w: DenseTensor, bias: Vec<f64>, activation: Activation, n_spatial: usize) -> Result<Self> {
        if w.ndim() < 2 + n_spatial.max(1) || n_spatial == 0 {
            return Err(Error::InvalidArg(format!(
                "weight tensor with {} modes cannot carry {} spatial modes",
                w.ndim(),
                n_spatial
            )));
        }
        if bias.len() != w.shape()[0] {
            return Err(Error::InvalidArg(format!(
                "{} bias entries for {} outputs",
                bias.len(),
                w.shape()[0]
            )));
        }
        Ok(FullRankModel { w, bias, activation, n_spatial })
    }

    pub fn n_outputs(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn spatial_dims(&self) -> &[usize] {
        &self.w.shape()[2..]
    }

    /// Indices of the spatial modes within `w`.
    pub fn spatial_modes(&self) -> Vec<usize> {
        (2..2 + self.n_spatial).collect()
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        let ws = self.w.shape();
        let xs = b.x.shape();
        if xs.len() != ws.len() {
            return Err(Error::InvalidArg(format!(
                "input with {} modes against weight with {} modes",
                xs.len(),
                ws.len()
            )));
        }
        for m in 1..ws.len() {
            if ws[m] != xs[m] {
                return Err(Error::ShapeMismatch { mode: m, left: ws[m], right: xs[m] });
            }
        }
        if b.n_outputs != self.n_outputs() {
            return Err(Error::ShapeMismatch {
                mode: 0,
                left: self.n_outputs(),
                right: b.n_outputs,
            });
        }
        Ok(())
    }
}

/// CP-parameterized model: factors `[A, B, C_1, ..., C_m]` over outputs,
/// features and each spatial mode.
#[derive(Debug, Clone)]
pub struct LowRankModel {
    pub factors: Vec<Matrix>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub rank: usize,
}

impl LowRankModel {
    pub fn new(factors: Vec<Matrix>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if factors.len() < 3 {
            return Err(Error::InvalidArg("low-rank model needs at least A, B and one spatial factor".into()));
        }
        let rank = factors[0].cols();
        for f in &factors {
            if f.cols() != rank {
                return Err(Error::RankMismatch { expected: rank, found: f.cols() });
            }
        }
        if bias.len() != factors[0].rows() {
            return Err(Error::InvalidArg(format!(
                "{} bias entries for {} outputs",
                bias.len(),
                factors[0].rows()
            )));
        }
        Ok(LowRankModel { factors, bias, activation, rank })
    }

    pub fn n_outputs(&self) -> usize {
        self.factors[0].rows()
    }

    pub fn n_features(&self) -> usize {
        self.factors[1].rows()
    }

    pub fn n_spatial(&self) -> usize {
        self.factors.len() - 2
    }

    pub fn spatial_factors(&self) -> &[Matrix] {
        &self.factors[2..]
    }

    /// Indices of spatial factor matrices within `factors`.
    pub fn spatial_factor_indices(&self) -> Vec<usize> {
        (2..self.factors.len()).collect()
    }

    /// Materializes the full weight tensor; test and export use only.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let lambdas = vec![1.0; self.rank];
        cp_reconstruct(&self.factors, &lambdas)
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        let xs = b.x.shape();
        if xs.len() != 2 + self.n_spatial() {
            return Err(Error::InvalidArg(format!(
                "input with {} modes against {} factor modes",
                xs.len(),
                2 + self.n_spatial()
            )));
        }
        if xs[1] != self.n_features() {
            return Err(Error::ShapeMismatch { mode: 1, left: self.n_features(), right: xs[1] });
        }
        for (i, c) in self.spatial_factors().iter().enumerate() {
            if xs[2 + i] != c.rows() {
                return Err(Error::ShapeMismatch { mode: 2 + i, left: c.rows(), right: xs[2 + i] });
            }
        }
        if b.n_outputs != self.n_outputs() {
            return Err(Error::ShapeMismatch { mode: 0, left: self.n_outputs(), right: b.n_outputs });
        }
        Ok(())
    }
}

/// Gradient blocks for the full-rank model.
#[derive(Debug, Clone)]
pub struct FullGrads {
    pub w: DenseTensor,
    pub bias: Vec<f64>,
}

/// Gradient blocks for the low-rank model, one per factor matrix.
#[derive(Debug, Clone)]
pub struct LowGrads {
    pub factors: Vec<Matrix>,
    pub bias: Vec<f64>,
}

/// Predictions `a(Σ_{f,d} W[i,f,d] X[n,f,d] + b_i)`, row-major over
/// `(sample, output)`. Also returns the multiply-accumulate count.
pub fn forward_full(m: &FullRankModel, b: &Batch) -> Result<(Vec<f64>, u64)> {
    m.check_batch(b)?;
    let n = b.n_samples();
    let i_out = m.n_outputs();
    let slice = b.sample_len();
    let w = m.w.data();
    let x = b.x.data();

    let preds = chunked_reduce(
        n,
        |range| {
            let mut out = Vec::with_capacity(range.len() * i_out);
            for s in range {
                let xs = &x[s * slice..(s + 1) * slice];
                for i in 0..i_out {
                    let wi = &w[i * slice..(i + 1) * slice];
                    let z: f64 = wi.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + m.bias[i];
                    out.push(m.activation.apply(z));
                }
            }
            out
        },
        |mut acc: Vec<f64>, part| {
            acc.extend(part);
            acc
        },
        Vec::new(),
    );
    let macs = (n * i_out * slice) as u64;
    Ok((preds, macs))
}

/// Low-rank predictions via factored contraction. Matches
/// `forward_full(reconstruct(factors))` without building the weight tensor.
pub fn forward_low(m: &LowRankModel, b: &Batch) -> Result<(Vec<f64>, u64)> {
    m.check_batch(b)?;
    let n = b.n_samples();
    let (preds, macs) = chunked_reduce(
        n,
        |range| {
            let mut ws = LowRankWorkspace::new(m, b);
            let mut out = Vec::with_capacity(range.len() * m.n_outputs());
            let mut macs = 0u64;
            for s in range {
                macs += ws.forward(m, b, s);
                out.extend_from_slice(&ws.preds);
            }
            (out, macs)
        },
        |(mut acc, macs): (Vec<f64>, u64), (part, pmacs)| {
            acc.extend(part);
            (acc, macs + pmacs)
        },
        (Vec::new(), 0),
    );
    Ok((preds, macs))
}

/// Scratch for one sample of the factored forward/backward pass. The
/// `bufs[j]` chain holds the input contracted against the spatial factors
/// from the last mode back to mode `j`.
struct LowRankWorkspace {
    /// bufs[j]: (features * D_1 * ... * D_j) x rank, for j = 0..m-1.
    bufs: Vec<Vec<f64>>,
    dbufs: Vec<Vec<f64>>,
    /// t[k] = Σ_f B[f,k] bufs[0][f,k].
    t: Vec<f64>,
    dt: Vec<f64>,
    z: Vec<f64>,
    preds: Vec<f64>,
    spatial_dims: Vec<usize>,
}

impl LowRankWorkspace {
    fn new(m: &LowRankModel, b: &Batch) -> Self {
        let k = m.rank;
        let f = m.n_features();
        let spatial_dims: Vec<usize> = b.x.shape()[2..].to_vec();
        let mut bufs = Vec::new();
        let mut prefix = f;
        for j in 0..spatial_dims.len() {
            let _ = j;
            bufs.push(vec![0.0; prefix * k]);
            prefix *= spatial_dims[bufs.len() - 1];
        }
        // bufs[j] has size f * prod(spatial_dims[..j]) * k.
        let dbufs = bufs.clone();
        LowRankWorkspace {
            bufs,
            dbufs,
            t: vec![0.0; k],
            dt: vec![0.0; k],
            z: vec![0.0; m.n_outputs()],
            preds: vec![0.0; m.n_outputs()],
            spatial_dims,
        }
    }

    /// Contracts sample `s` and fills `z`/`preds`. Returns MACs.
    fn forward(&mut self, m: &LowRankModel, b: &Batch, s: usize) -> u64 {
        let k = m.rank;
        let f = m.n_features();
        let slice = b.sample_len();
        let x = &b.x.data()[s * slice..(s + 1) * slice];
        let n_sp = self.spatial_dims.len();
        let mut macs = 0u64;

        // Contract the last spatial mode against X (which carries no rank
        // index), then walk the remaining modes inward.
        for j in (0..n_sp).rev() {
            let d = self.spatial_dims[j];
            let c = &m.factors[2 + j];
            let rows: usize = f * self.spatial_dims[..j].iter().product::<usize>();
            if j == n_sp - 1 {
                let buf = &mut self.bufs[j];
                buf.iter_mut().for_each(|v| *v = 0.0);
                for q in 0..rows {
                    let xrow = &x[q * d..(q + 1) * d];
                    let brow = &mut buf[q * k..(q + 1) * k];
                    for (dd, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let crow = c.row(dd);
                        for (bv, cv) in brow.iter_mut().zip(crow) {
                            *bv += xv * cv;
                        }
                    }
                }
                macs += (rows * d * k) as u64;
            } else {
                let (dst_part, src_part) = self.bufs.split_at_mut(j + 1);
                let dst = &mut dst_part[j];
                let src = &src_part[0];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for q in 0..rows {
                    let drow = &mut dst[q * k..(q + 1) * k];
                    for dd in 0..d {
                        let srow = &src[(q * d + dd) * k..(q * d + dd + 1) * k];
                        let crow = c.row(dd);
                        for ((dv, sv), cv) in drow.iter_mut().zip(srow).zip(crow) {
                            *dv += sv * cv;
                        }
                    }
                }
                macs += (rows * d * k) as u64;
            }
        }

        let bmat = &m.factors[1];
        self.t.iter_mut().for_each(|v| *v = 0.0);
        for ff in 0..f {
            let brow = bmat.row(ff);
            let srow = &self.bufs[0][ff * k..(ff + 1) * k];
            for ((tv, bv), sv) in self.t.iter_mut().zip(brow).zip(srow) {
                *tv += bv * sv;
            }
        }
        macs += (f * k) as u64;

        let amat = &m.factors[0];
        for i in 0..m.n_outputs() {
            let arow = amat.row(i);
            let z: f64 = arow.iter().zip(&self.t).map(|(a, t)| a * t).sum::<f64>() + m.bias[i];
            self.z[i] = z;
            self.preds[i] = m.activation.apply(z);
        }
        macs += (m.n_outputs() * k) as u64;
        macs
    }

    /// Backpropagates `dz` for sample `s` into the gradient blocks.
    /// `forward` must have run for the same sample. Returns MACs.
    fn backward(&mut self, m: &LowRankModel, b: &Batch, s: usize, dz: &[f64], g: &mut LowGrads) -> u64 {
        let k = m.rank;
        let f = m.n_features();
        let slice = b.sample_len();
        let x = &b.x.data()[s * slice..(s + 1) * slice];
        let n_sp = self.spatial_dims.len();
        let mut macs = 0u64;

        // Output factor.
        let amat = &m.factors[0];
        self.dt.iter_mut().for_each(|v| *v = 0.0);
        for (i, &dzi) in dz.iter().enumerate() {
            g.bias[i] += dzi;
            let arow = amat.row(i);
            let garow = g.factors[0].row_mut(i);
            for kk in 0..k {
                self.dt[kk] += dzi * arow[kk];
                garow[kk] += dzi * self.t[kk];
            }
        }
        macs += (dz.len() * k * 2) as u64;

        // Feature factor.
        let bmat = &m.factors[1];
        for ff in 0..f {
            let brow = bmat.row(ff);
            let srow = &self.bufs[0][ff * k..(ff + 1) * k];
            let gb = g.factors[1].row_mut(ff);
            let db = &mut self.dbufs[0][ff * k..(ff + 1) * k];
            for kk in 0..k {
                gb[kk] += self.dt[kk] * srow[kk];
                db[kk] = self.dt[kk] * brow[kk];
            }
        }
        macs += (f * k * 2) as u64;

        // Spatial factors, walking outward.
        for j in 0..n_sp {
            let d = self.spatial_dims[j];
            let c = &m.factors[2 + j];
            let rows: usize = f * self.spatial_dims[..j].iter().product::<usize>();
            let gc = &mut g.factors[2 + j];
            if j == n_sp - 1 {
                // dC[d,k] += Σ_q dbuf[q,k] * x[q*d + dd]; X carries no rank.
                let dbuf = &self.dbufs[j];
                for q in 0..rows {
                    let drow = &dbuf[q * k..(q + 1) * k];
                    let xrow = &x[q * d..(q + 1) * d];
                    for (dd, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let gcrow = gc.row_mut(dd);
                        for (gv, dv) in gcrow.iter_mut().zip(drow) {
                            *gv += dv * xv;
                        }
                    }
                }
                macs += (rows * d * k) as u64;
            } else {
                let (head, tail) = self.dbufs.split_at_mut(j + 1);
                let dbuf = &head[j];
                let dnext = &mut tail[0];
                let src = &self.bufs[j + 1];
                for q in 0..rows {
                    let drow = &dbuf[q * k..(q + 1) * k];
                    for dd in 0..d {
                        let srow = &src[(q * d + dd) * k..(q * d + dd + 1) * k];
                        let crow = c.row(dd);
                        let gcrow = gc.row_mut(dd);
                        let dnrow = &mut dnext[(q * d + dd) * k..(q * d + dd + 1) * k];
                        for kk in 0..k {
                            gcrow[kk] += drow[kk] * srow[kk];
                            dnrow[kk] = drow[kk] * crow[kk];
                        }
                    }
                }
                macs += (rows * d * k * 2) as u64;
            }
        }
        macs
    }
}

/// Weighted cross entropy, mean over `(sample, output)` entries. `beta`
/// scales the positive term (both terms when `beta_on_both`). Predictions
/// are clamped to `[1e-12, 1 - 1e-12]` before the logs.
pub fn loss_weighted_ce(
    pred: &[f64],
    y: &[f64],
    n_outputs: usize,
    beta: f64,
    beta_on_both: bool,
    sample_weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != y.len() {
        return Err(Error::InvalidArg(format!("{} predictions vs {} labels", pred.len(), y.len())));
    }
    let n_entries = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (e, (&p, &yy)) in pred.iter().zip(y).enumerate() {
        if yy != 0.0 && yy != 1.0 {
            return Err(Error::InvalidArg(format!("label {yy} outside {{0,1}}")));
        }
        let sw = sample_weights.map_or(1.0, |w| w[e / n_outputs]);
        let pc = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        let neg_scale = if beta_on_both { beta } else { 1.0 };
        value += sw * (-(beta * yy * pc.ln()) - neg_scale * (1.0 - yy) * (1.0 - pc).ln());
        grad[e] = sw * (-(beta * yy / pc) + neg_scale * (1.0 - yy) / (1.0 - pc)) / n_entries;
    }
    Ok((value / n_entries, grad))
}

/// Mean squared error over `(sample, output)` entries.
pub fn loss_mse(
    pred: &[f64],
    y: &[f64],
    n_outputs: usize,
    sample_weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != y.len() {
        return Err(Error::InvalidArg(format!("{} predictions vs {} labels", pred.len(), y.len())));
    }
    let n_entries = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (e, (&p, &yy)) in pred.iter().zip(y).enumerate() {
        let sw = sample_weights.map_or(1.0, |w| w[e / n_outputs]);
        let r = p - yy;
        value += sw * r * r;
        grad[e] = sw * 2.0 * r / n_entries;
    }
    Ok((value / n_entries, grad))
}

/// Evaluates the configured loss and its gradient with respect to the
/// predictions.
pub fn loss_eval(
    kind: &LossKind,
    pred: &[f64],
    b: &Batch,
) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::WeightedCe { beta, beta_on_both } => loss_weighted_ce(
            pred,
            &b.y,
            b.n_outputs,
            *beta,
            *beta_on_both,
            b.sample_weights.as_deref(),
        ),
        LossKind::Mse => loss_mse(pred, &b.y, b.n_outputs, b.sample_weights.as_deref()),
    }
}

/// Loss value only (no gradient); used for validation sweeps.
pub fn loss_value(kind: &LossKind, pred: &[f64], b: &Batch) -> Result<f64> {
    loss_eval(kind, pred, b).map(|(v, _)| v)
}

/// Per-entry loss and its derivative with respect to the prediction,
/// before the 1/(n*I) mean scaling.
#[inline]
fn entry_loss(kind: &LossKind, p: f64, y: f64, sw: f64) -> Result<(f64, f64)> {
    match kind {
        LossKind::WeightedCe { beta, beta_on_both } => {
            if y != 0.0 && y != 1.0 {
                return Err(Error::InvalidArg(format!("label {y} outside {{0,1}}")));
            }
            let pc = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            let neg_scale = if *beta_on_both { *beta } else { 1.0 };
            let l = -(beta * y * pc.ln()) - neg_scale * (1.0 - y) * (1.0 - pc).ln();
            let dl = -(beta * y / pc) + neg_scale * (1.0 - y) / (1.0 - pc);
            Ok((sw * l, sw * dl))
        }
        LossKind::Mse => {
            let r = p - y;
            Ok((sw * r * r, sw * 2.0 * r))
        }
    }
}

/// Full-rank loss and parameter gradients for one batch, in one pass.
/// Returns (loss, predictions, gradients, macs).
pub fn backward_full(
    m: &FullRankModel,
    b: &Batch,
    loss: &LossKind,
) -> Result<(f64, Vec<f64>, FullGrads, u64)> {
    m.check_batch(b)?;
    let n = b.n_samples();
    let i_out = m.n_outputs();
    let slice = b.sample_len();
    let w = m.w.data();
    let x = b.x.data();
    let n_entries = (n * i_out) as f64;

    type Part = (f64, Vec<f64>, Vec<f64>, Vec<f64>, u64);
    let folded: Result<Part> = chunked_reduce(
        n,
        |range| -> Result<Part> {
            let mut loss_sum = 0.0;
            let mut preds = Vec::with_capacity(range.len() * i_out);
            let mut gw = vec![0.0; m.w.len()];
            let mut gb = vec![0.0; i_out];
            let mut macs = 0u64;
            for s in range {
                let xs = &x[s * slice..(s + 1) * slice];
                let sw = b.sample_weights.as_ref().map_or(1.0, |v| v[s]);
                for i in 0..i_out {
                    let wi = &w[i * slice..(i + 1) * slice];
                    let z: f64 = wi.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + m.bias[i];
                    let p = m.activation.apply(z);
                    preds.push(p);
                    let (l, dl) = entry_loss(loss, p, b.y[s * i_out + i], sw)?;
                    loss_sum += l;
                    let dz = dl / n_entries * m.activation.derivative_from_output(p);
                    macs += slice as u64;
                    if dz == 0.0 {
                        continue;
                    }
                    gb[i] += dz;
                    let gwi = &mut gw[i * slice..(i + 1) * slice];
                    for (g, &xv) in gwi.iter_mut().zip(xs) {
                        *g += dz * xv;
                    }
                    macs += slice as u64;
                }
            }
            Ok((loss_sum, preds, gw, gb, macs))
        },
        |acc, part| {
            let (mut al, mut ap, mut aw, mut ab, am) = acc?;
            let (pl, pp, pw, pb, pm) = part?;
            al += pl;
            ap.extend(pp);
            for (a, p) in aw.iter_mut().zip(&pw) {
                *a += p;
            }
            for (a, p) in ab.iter_mut().zip(&pb) {
                *a += p;
            }
            Ok((al, ap, aw, ab, am + pm))
        },
        Ok((0.0, Vec::new(), vec![0.0; m.w.len()], vec![0.0; i_out], 0)),
    );
    let (loss_sum, preds, gw, gb, macs) = folded?;
    let w_grad = DenseTensor::from_vec(m.w.shape(), gw)
        .map_err(|_| Error::NonFinite("full-rank gradient".into()))?;
    Ok((loss_sum / n_entries, preds, FullGrads { w: w_grad, bias: gb }, macs))
}

/// Low-rank loss and per-factor gradients for one batch, in one pass.
/// Returns (loss, predictions, gradients, macs).
pub fn backward_low(
    m: &LowRankModel,
    b: &Batch,
    loss: &LossKind,
) -> Result<(f64, Vec<f64>, LowGrads, u64)> {
    m.check_batch(b)?;
    let n = b.n_samples();
    let i_out = m.n_outputs();
    let n_entries = (n * i_out) as f64;

    let zero_grads = || LowGrads {
        factors: m.factors.iter().map(|f| Matrix::zeros(f.rows(), f.cols())).collect(),
        bias: vec![0.0; i_out],
    };

    type Part = (f64, Vec<f64>, LowGrads, u64);
    let folded: Result<Part> = chunked_reduce(
        n,
        |range| -> Result<Part> {
            let mut ws = LowRankWorkspace::new(m, b);
            let mut g = zero_grads();
            let mut loss_sum = 0.0;
            let mut preds = Vec::with_capacity(range.len() * i_out);
            let mut macs = 0u64;
            let mut dz = vec![0.0; i_out];
            for s in range {
                macs += ws.forward(m, b, s);
                let sw = b.sample_weights.as_ref().map_or(1.0, |v| v[s]);
                for i in 0..i_out {
                    let p = ws.preds[i];
                    preds.push(p);
                    let (l, dl) = entry_loss(loss, p, b.y[s * i_out + i], sw)?;
                    loss_sum += l;
                    dz[i] = dl / n_entries * m.activation.derivative_from_output(p);
                }
                macs += ws.backward(m, b, s, &dz, &mut g);
            }
            Ok((loss_sum, preds, g, macs))
        },
        |acc, part| {
            let (mut al, mut ap, mut ag, am) = acc?;
            let (pl, pp, pg, pm) = part?;
            al += pl;
            ap.extend(pp);
            for (a, p) in ag.factors.iter_mut().zip(&pg.factors) {
                for (av, pv) in a.data_mut().iter_mut().zip(p.data()) {
                    *av += pv;
                }
            }
            for (a, p) in ag.bias.iter_mut().zip(&pg.bias) {
                *a += p;
            }
            Ok((al, ap, ag, am + pm))
        },
        Ok((0.0, Vec::new(), zero_grads(), 0)),
    );
    let (loss_sum, preds, grads, macs) = folded?;
    Ok((loss_sum / n_entries, preds, grads, macs))
}
