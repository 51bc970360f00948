//! Synthetic spatial tasks with planted ground-truth factors, resolution
//! downsampling consistent with both finegraining schemes, splits, and the
//! CSV loader for user data.
//!
//! Labels are generated at the finest resolution; coarser inputs are
//! derived by downsampling, which makes the cross-resolution output
//! identities hold by construction.

use crate::cp::CpFactors;
use crate::error::{Error, Result};
use crate::grid::{cell_centers, GridSpec, ResolutionLadder};
use crate::model::Batch;
use crate::tensor::{cp_reconstruct, DenseTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// How cell values aggregate when moving to a coarser grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleKind {
    /// Per-coarse-cell sum; preserves totals exactly (one-hot counts).
    Categorical,
    /// Per-coarse-cell mean (continuous averages).
    Continuous,
}

impl TaskKind {
    pub fn downsample_kind(&self) -> DownsampleKind {
        match self {
            TaskKind::Classification => DownsampleKind::Categorical,
            TaskKind::Regression => DownsampleKind::Continuous,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub outputs: usize,
    pub features: usize,
    pub ladder: ResolutionLadder,
    pub true_rank: usize,
    /// Gaussian bump width in physical units of the extent.
    pub smoothness: f64,
    pub noise_sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.outputs == 0 || self.features == 0 || self.true_rank == 0 {
            return Err(Error::InvalidArg("outputs, features and true_rank must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 || self.smoothness <= 0.0 {
            return Err(Error::InvalidArg("noise_sigma must be >= 0 and smoothness > 0".into()));
        }
        if self.samples < 5 {
            return Err(Error::InvalidArg("need at least 5 samples to split".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 60-20-20 split by seeded shuffle: floor(0.6n) / floor(0.2n) / remainder.
pub fn split(n: usize, seed: u64) -> Result<Split> {
    if n < 5 {
        return Err(Error::InvalidArg(format!("cannot split {n} samples 60-20-20")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (0.6 * n as f64).floor() as usize;
    let n_val = (0.2 * n as f64).floor() as usize;
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok(Split { train, val, test })
}

/// One task instance: per-resolution input tensors `(samples, features,
/// cells)`, labels `(samples, outputs)`, and the split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ladder: ResolutionLadder,
    pub inputs: Vec<DenseTensor>,
    pub labels: Vec<f64>,
    pub n_outputs: usize,
    pub task: TaskKind,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.labels.len() / self.n_outputs
    }

    pub fn n_features(&self) -> usize {
        self.inputs[0].shape()[1]
    }

    /// Negative/positive label ratio over the training split.
    pub fn class_balance_beta(&self) -> Result<f64> {
        let train_labels: Vec<f64> = self
            .split
            .train
            .iter()
            .flat_map(|&s| {
                (0..self.n_outputs).map(move |i| self.labels[s * self.n_outputs + i])
            })
            .collect();
        crate::model::beta_from_labels(&train_labels)
    }

    /// Gathers `indices` rows of resolution `level` into an owned batch.
    pub fn make_batch(&self, level: usize, indices: &[usize]) -> Result<Batch> {
        let x = &self.inputs[level];
        let slice: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * slice);
        for &s in indices {
            data.extend_from_slice(&x.data()[s * slice..(s + 1) * slice]);
        }
        let mut y = Vec::with_capacity(indices.len() * self.n_outputs);
        for &s in indices {
            y.extend_from_slice(&self.labels[s * self.n_outputs..(s + 1) * self.n_outputs]);
        }
        Batch::new(DenseTensor::from_vec(&shape, data)?, y, None, self.n_outputs)
    }
}

/// Sum or average spatially nested fine cells into coarse cells along the
/// last mode of `(samples, features, fine_cells)`.
pub fn downsample(
    x_fine: &DenseTensor,
    fine: &GridSpec,
    coarse: &GridSpec,
    kind: DownsampleKind,
) -> Result<DenseTensor> {
    let ratios = coarse.refinement_ratios(fine)?;
    let df = fine.cell_count();
    let dc = coarse.cell_count();
    let last = x_fine.ndim() - 1;
    if x_fine.shape()[last] != df {
        return Err(Error::ShapeMismatch { mode: last, left: x_fine.shape()[last], right: df });
    }
    let mut parent = vec![0usize; df];
    for f in 0..df {
        let fc = fine.cell_coords(f);
        let cc: Vec<usize> = fc.iter().zip(&ratios).map(|(&c, &r)| c / r).collect();
        parent[f] = coarse.cell_index(&cc);
    }
    let children_per_cell: usize = ratios.iter().product();
    let rows: usize = x_fine.shape()[..last].iter().product();
    let mut shape = x_fine.shape().to_vec();
    shape[last] = dc;
    let mut out = DenseTensor::zeros(&shape);
    for r in 0..rows {
        let src = &x_fine.data()[r * df..(r + 1) * df];
        let dst = &mut out.data_mut()[r * dc..(r + 1) * dc];
        for (f, &v) in src.iter().enumerate() {
            dst[parent[f]] += v;
        }
        if kind == DownsampleKind::Continuous {
            for v in dst.iter_mut() {
                *v /= children_per_cell as f64;
            }
        }
    }
    Ok(out)
}

/// Exact replication upsample: each fine cell copies its parent's value.
/// `downsample(continuous) . upsample_replicate` is a projection.
pub fn upsample_replicate(
    x_coarse: &DenseTensor,
    coarse: &GridSpec,
    fine: &GridSpec,
) -> Result<DenseTensor> {
    let ratios = coarse.refinement_ratios(fine)?;
    let df = fine.cell_count();
    let dc = coarse.cell_count();
    let last = x_coarse.ndim() - 1;
    if x_coarse.shape()[last] != dc {
        return Err(Error::ShapeMismatch { mode: last, left: x_coarse.shape()[last], right: dc });
    }
    let rows: usize = x_coarse.shape()[..last].iter().product();
    let mut shape = x_coarse.shape().to_vec();
    shape[last] = df;
    let mut out = DenseTensor::zeros(&shape);
    for r in 0..rows {
        let src = &x_coarse.data()[r * dc..(r + 1) * dc];
        let dst = &mut out.data_mut()[r * df..(r + 1) * df];
        for (f, d) in dst.iter_mut().enumerate() {
            let fc = fine.cell_coords(f);
            let cc: Vec<usize> = fc.iter().zip(&ratios).map(|(&c, &rr)| c / rr).collect();
            *d = src[coarse.cell_index(&cc)];
        }
    }
    Ok(out)
}

/// Sum of seeded Gaussian bumps, evaluated at arbitrary points; the same
/// bumps can be sampled at every resolution, which is what keeps the
/// planted solution smooth across the ladder.
#[derive(Debug, Clone)]
struct BumpField {
    centers: Vec<Vec<f64>>,
    amps: Vec<f64>,
    width: f64,
}

impl BumpField {
    fn random(g: &GridSpec, n_bumps: usize, width: f64, rng: &mut ChaCha8Rng) -> Self {
        let centers = (0..n_bumps)
            .map(|_| g.extent.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect())
            .collect();
        let amps = (0..n_bumps)
            .map(|_| {
                let a = rng.gen_range(0.7..1.3);
                if rng.gen_bool(0.5) {
                    a
                } else {
                    -a
                }
            })
            .collect();
        BumpField { centers, amps, width }
    }

    fn eval(&self, point: &[f64]) -> f64 {
        self.centers
            .iter()
            .zip(&self.amps)
            .map(|(c, &a)| {
                let d2: f64 = c.iter().zip(point).map(|(x, y)| (x - y) * (x - y)).sum();
                a * (-d2 / (2.0 * self.width * self.width)).exp()
            })
            .sum()
    }

    fn eval_grid(&self, g: &GridSpec) -> Vec<f64> {
        cell_centers(g).iter().map(|c| self.eval(c)).collect()
    }
}

/// Generates the task, returning the dataset and the planted factors
/// evaluated at every ladder level.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Vec<CpFactors>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.true_rank;
    let (i_out, f_in, n) = (spec.outputs, spec.features, spec.samples);
    let levels = &spec.ladder.levels;
    let finest = spec.ladder.finest();

    // Planted factors: A, B unit-norm columns; spatial factors are bump
    // fields shared across resolutions.
    let mut a = Matrix::zeros(i_out, k);
    let mut b = Matrix::zeros(f_in, k);
    for m in [&mut a, &mut b] {
        for c in 0..m.cols() {
            let col: Vec<f64> = (0..m.rows()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (r, v) in col.iter().enumerate() {
                m.set(r, c, v / norm);
            }
        }
    }
    let bumps: Vec<BumpField> =
        (0..k).map(|_| BumpField::random(finest, 2, spec.smoothness, &mut rng)).collect();

    let spatial_per_level: Vec<Matrix> = levels
        .iter()
        .map(|g| {
            let d = g.cell_count();
            let mut c = Matrix::zeros(d, k);
            for (kk, bump) in bumps.iter().enumerate() {
                for (cell, v) in bump.eval_grid(g).iter().enumerate() {
                    c.set(cell, kk, *v);
                }
            }
            c
        })
        .collect();

    let d_fin = finest.cell_count();
    let c_fin = spatial_per_level.last().expect("ladder non-empty");
    let w_raw = cp_reconstruct(
        &[a.clone(), b.clone(), c_fin.clone()],
        &vec![1.0; k],
    )?;

    // Inputs at the finest resolution plus the raw linear responses.
    let mut x_fin = DenseTensor::zeros(&[n, f_in, d_fin]);
    let mut z_raw = vec![0.0; n * i_out];
    match spec.task {
        TaskKind::Classification => {
            for s in 0..n {
                let cell = rng.gen_range(0..d_fin);
                let feats: Vec<f64> =
                    (0..f_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                for (ff, &fv) in feats.iter().enumerate() {
                    x_fin.set(&[s, ff, cell], fv);
                }
                for i in 0..i_out {
                    let mut z = 0.0;
                    for (ff, &fv) in feats.iter().enumerate() {
                        z += w_raw.get(&[i, ff, cell]) * fv;
                    }
                    z_raw[s * i_out + i] = z;
                }
            }
        }
        TaskKind::Regression => {
            for s in 0..n {
                for ff in 0..f_in {
                    let field = BumpField::random(finest, 3, spec.smoothness, &mut rng);
                    let vals = field.eval_grid(finest);
                    for (cell, &v) in vals.iter().enumerate() {
                        x_fin.set(&[s, ff, cell], v);
                    }
                }
                for i in 0..i_out {
                    let mut z = 0.0;
                    for ff in 0..f_in {
                        for cell in 0..d_fin {
                            z += w_raw.get(&[i, ff, cell]) * x_fin.get(&[s, ff, cell]);
                        }
                    }
                    z_raw[s * i_out + i] = z;
                }
            }
        }
    }

    // Rescale the planted model so the responses have a useful spread:
    // std 2 keeps sigmoid outputs informative, std 1 for regression.
    let mean = z_raw.iter().sum::<f64>() / z_raw.len() as f64;
    let var = z_raw.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / z_raw.len() as f64;
    let target_std = match spec.task {
        TaskKind::Classification => 2.0,
        TaskKind::Regression => 1.0,
    };
    let scale = target_std / var.sqrt().max(1e-9);
    for v in a.data_mut() {
        *v *= scale;
    }

    let bias_truth: Vec<f64> = match spec.task {
        TaskKind::Classification => (0..i_out).map(|_| rng.gen_range(-1.2..-0.6)).collect(),
        TaskKind::Regression => vec![0.0; i_out],
    };

    let mut labels = vec![0.0; n * i_out];
    match spec.task {
        TaskKind::Classification => {
            for e in 0..n * i_out {
                let p = 1.0 / (1.0 + (-(z_raw[e] * scale + bias_truth[e % i_out])).exp());
                labels[e] = if Bernoulli::new(p).expect("p in (0,1)").sample(&mut rng) {
                    1.0
                } else {
                    0.0
                };
            }
        }
        TaskKind::Regression => {
            for e in 0..n * i_out {
                let noise: f64 = rng.sample(StandardNormal);
                labels[e] = z_raw[e] * scale + spec.noise_sigma * noise;
            }
        }
    }

    // Coarser inputs by walking the ladder down from the finest level.
    let kind = spec.task.downsample_kind();
    let mut inputs: Vec<Option<DenseTensor>> = vec![None; levels.len()];
    inputs[levels.len() - 1] = Some(x_fin);
    for li in (0..levels.len() - 1).rev() {
        let finer = inputs[li + 1].take();
        let finer = finer.expect("finer level filled");
        inputs[li] = Some(downsample(&finer, &levels[li + 1], &levels[li], kind)?);
        inputs[li + 1] = Some(finer);
    }
    let inputs: Vec<DenseTensor> = inputs.into_iter().map(|x| x.expect("level filled")).collect();

    let truth: Vec<CpFactors> = spatial_per_level
        .into_iter()
        .map(|c| CpFactors {
            factors: vec![a.clone(), b.clone(), c],
            lambdas: vec![1.0; k],
        })
        .collect();

    let dataset = Dataset {
        ladder: spec.ladder.clone(),
        inputs,
        labels,
        n_outputs: i_out,
        task: spec.task,
        split: split(n, spec.seed ^ 0x5eed_5eed)?,
        seed: spec.seed,
    };
    Ok((dataset, truth))
}

/// Loads user data from CSV: header `id:HxW,s0,...,f0,...,label`, one row
/// per sample. Spatial values live on the ladder's finest grid; the sample
/// input is the rank-1 cross `feature x spatial`. Single output.
pub fn load_csv_dataset(path: &Path, ladder: &ResolutionLadder, task: TaskKind, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Format("empty CSV header".into()));
    }
    let id_col = headers.get(0).unwrap_or_default();
    let dims_part = id_col
        .strip_prefix("id:")
        .ok_or_else(|| Error::Format("first CSV column must be 'id:<dims>' e.g. id:4x5".into()))?;
    let dims: Vec<usize> = dims_part
        .split('x')
        .map(|t| t.parse::<usize>().map_err(|_| Error::Format(format!("bad grid dims '{dims_part}'"))))
        .collect::<Result<_>>()?;
    let grid = GridSpec::new(dims, ladder.finest().extent.clone())?;
    if grid.dims != ladder.finest().dims {
        return Err(Error::Format(format!(
            "CSV grid {:?} does not match the ladder's finest level {:?}",
            grid.dims,
            ladder.finest().dims
        )));
    }
    let d = grid.cell_count();
    let n_spatial_cols = headers.iter().filter(|h| h.starts_with('s')).count();
    if n_spatial_cols != d {
        return Err(Error::Format(format!("{n_spatial_cols} spatial columns for {d} cells")));
    }
    let f_in = headers.iter().filter(|h| h.starts_with('f')).count();
    if f_in == 0 || headers.iter().next_back() != Some("label") {
        return Err(Error::Format("CSV needs f* feature columns and a trailing 'label'".into()));
    }

    let mut spat: Vec<f64> = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 1 + d + f_in + 1 {
            return Err(Error::Format(format!("row with {} fields, expected {}", record.len(), 2 + d + f_in)));
        }
        for t in 1..=d {
            spat.push(parse_field(&record, t)?);
        }
        for t in d + 1..=d + f_in {
            feats.push(parse_field(&record, t)?);
        }
        labels.push(parse_field(&record, d + f_in + 1)?);
    }
    let n = labels.len();
    if n < 5 {
        return Err(Error::InvalidArg("need at least 5 samples".into()));
    }

    // Rank-1 per-sample input at the finest level.
    let mut x_fin = DenseTensor::zeros(&[n, f_in, d]);
    for s in 0..n {
        for ff in 0..f_in {
            let fv = feats[s * f_in + ff];
            for cell in 0..d {
                let v = fv * spat[s * d + cell];
                if v != 0.0 {
                    x_fin.set(&[s, ff, cell], v);
                }
            }
        }
    }
    let kind = task.downsample_kind();
    let mut inputs: Vec<DenseTensor> = Vec::with_capacity(ladder.n_levels());
    inputs.push(x_fin);
    for li in (0..ladder.n_levels() - 1).rev() {
        let ds = downsample(&inputs[inputs.len() - 1], &ladder.levels[li + 1], &ladder.levels[li], kind)?;
        inputs.push(ds);
    }
    inputs.reverse();

    Ok(Dataset {
        ladder: ladder.clone(),
        inputs,
        labels,
        n_outputs: 1,
        task,
        split: split(n, seed ^ 0x5eed_5eed)?,
        seed,
    })
}

fn parse_field(record: &csv::StringRecord, idx: usize) -> Result<f64> {
    record
        .get(idx)
        .and_then(|t| t.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::Format(format!("bad numeric field at column {idx}")))
}

/// Loads bulk inputs from one MRTN tensor per ladder level (shape
/// `(samples, features, cells)`) plus a labels CSV with header
/// `id,y0,...`; the format `generate` writes.
pub fn load_mrtn_dataset(
    inputs: &[std::path::PathBuf],
    labels_path: &Path,
    ladder: &ResolutionLadder,
    task: TaskKind,
    seed: u64,
) -> Result<Dataset> {
    if inputs.len() != ladder.n_levels() {
        return Err(Error::Format(format!(
            "{} input tensors for a {}-level ladder",
            inputs.len(),
            ladder.n_levels()
        )));
    }
    let tensors: Vec<DenseTensor> =
        inputs.iter().map(|p| crate::io::read_tensor_file(p)).collect::<Result<_>>()?;
    let n = tensors[0].shape()[0];
    let f_in = tensors[0].shape()[1];
    for (li, (t, g)) in tensors.iter().zip(&ladder.levels).enumerate() {
        if t.ndim() != 3 || t.shape()[0] != n || t.shape()[1] != f_in {
            return Err(Error::Format(format!("level {li}: tensor shape {:?}", t.shape())));
        }
        if t.shape()[2] != g.cell_count() {
            return Err(Error::Format(format!(
                "level {li}: {} cells in tensor, {} in ladder",
                t.shape()[2],
                g.cell_count()
            )));
        }
    }

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(labels_path)?;
    let n_outputs = reader.headers()?.len().saturating_sub(1);
    if n_outputs == 0 {
        return Err(Error::Format("labels CSV needs id plus y* columns".into()));
    }
    let mut labels = Vec::with_capacity(n * n_outputs);
    for record in reader.records() {
        let record = record?;
        if record.len() != 1 + n_outputs {
            return Err(Error::Format(format!("labels row with {} fields", record.len())));
        }
        for i in 1..=n_outputs {
            labels.push(parse_field(&record, i)?);
        }
    }
    if labels.len() != n * n_outputs {
        return Err(Error::Format(format!(
            "{} label rows for {} samples",
            labels.len() / n_outputs,
            n
        )));
    }
    if n < 5 {
        return Err(Error::InvalidArg("need at least 5 samples".into()));
    }
    Ok(Dataset {
        ladder: ladder.clone(),
        inputs: tensors,
        labels,
        n_outputs,
        task,
        split: split(n, seed ^ 0x5eed_5eed)?,
        seed,
    })
}
