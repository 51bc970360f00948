//! File formats: the MRTN binary tensor container, model checkpoints
//! (JSON header + tensor payloads), trace CSVs, run summaries and plain
//! PGM heatmaps.
//!
//! Everything written here is byte-deterministic for a fixed config and
//! seed: no timestamps, stable field order, shortest-roundtrip float
//! formatting.

use crate::data::TaskKind;
use crate::diagnostics::ResolutionCost;
use crate::error::{Error, Result};
use crate::model::{Activation, FullRankModel, LowRankModel};
use crate::tensor::{DenseTensor, Matrix};
use crate::train::{EpochRecord, ModelKind, ResumeMeta, Stage, TrainingTrace, TransitionCheck};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"MRTN";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";

pub fn write_tensor<W: Write>(w: &mut W, t: &DenseTensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &s in t.shape() {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let ndim = u32::from_le_bytes(buf4) as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible mode count {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf8 = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    DenseTensor::from_vec(&shape, data)
}

pub fn write_tensor_file(path: &Path, t: &DenseTensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<DenseTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// Numeric matrix from headerless CSV rows.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Format(format!(
                    "ragged CSV: row {rows} has {} fields, expected {c}",
                    record.len()
                )))
            }
            _ => {}
        }
        for field in record.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad numeric field '{field}'")))?,
            );
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Format("empty CSV".into()))?;
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Checkpoint header; tensor payloads follow in declaration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    /// Ladder level the snapshot was taken at.
    pub level: usize,
    /// Grid dims of the level (for heatmap exports).
    pub grid_dims: Vec<usize>,
    pub activation: Activation,
    /// CP rank (low-rank checkpoints only).
    pub rank: Option<usize>,
    pub bias: Vec<f64>,
    /// Tensor names in payload order.
    pub tensors: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    /// Training-state cursor for exact resumption (absent for derived
    /// checkpoints such as standalone decompositions).
    #[serde(default)]
    pub resume: Option<ResumeMeta>,
}

pub fn write_checkpoint(
    path: &Path,
    model: &ModelKind,
    level: usize,
    grid_dims: &[usize],
    seed: u64,
    config_hash: &str,
    resume: Option<ResumeMeta>,
) -> Result<()> {
    let (header, payloads): (CheckpointHeader, Vec<DenseTensor>) = match model {
        ModelKind::Full(m) => (
            CheckpointHeader {
                stage: Stage::Full,
                level,
                grid_dims: grid_dims.to_vec(),
                activation: m.activation,
                rank: None,
                bias: m.bias.clone(),
                tensors: vec!["w".into()],
                seed,
                config_hash: config_hash.into(),
                resume,
            },
            vec![m.w.clone()],
        ),
        ModelKind::Low(m) => {
            let names: Vec<String> = (0..m.factors.len())
                .map(|i| match i {
                    0 => "factor_outputs".into(),
                    1 => "factor_features".into(),
                    _ => format!("factor_spatial_{}", i - 2),
                })
                .collect();
            let payloads = m
                .factors
                .iter()
                .map(|f| {
                    DenseTensor::from_vec(&[f.rows(), f.cols()], f.data().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            (
                CheckpointHeader {
                    stage: Stage::Low,
                    level,
                    grid_dims: grid_dims.to_vec(),
                    activation: m.activation,
                    rank: Some(m.rank),
                    bias: m.bias.clone(),
                    tensors: names,
                    seed,
                    config_hash: config_hash.into(),
                    resume,
                },
                payloads,
            )
        }
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for t in &payloads {
        write_tensor(&mut f, t)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelKind)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let hlen = u32::from_le_bytes(buf4) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for _ in &header.tensors {
        tensors.push(read_tensor(&mut f)?);
    }
    let model = match header.stage {
        Stage::Full => {
            let w = tensors
                .into_iter()
                .next()
                .ok_or_else(|| Error::Format("full-rank checkpoint without tensor".into()))?;
            ModelKind::Full(FullRankModel::new(w, header.bias.clone(), header.activation, 1)?)
        }
        Stage::Low => {
            let factors = tensors
                .into_iter()
                .map(|t| {
                    if t.ndim() != 2 {
                        return Err(Error::Format("factor payload is not a matrix".into()));
                    }
                    Matrix::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            ModelKind::Low(LowRankModel::new(factors, header.bias.clone(), header.activation)?)
        }
    };
    Ok((header, model))
}

const TRACE_COLUMNS: [&str; 12] = [
    "stage",
    "resolution",
    "epoch",
    "train_loss",
    "val_loss",
    "grad_norm_sq",
    "grad_variance",
    "grad_entropy",
    "param_delta_norm",
    "cum_macs",
    "fired",
    "transitioned",
];

/// One row per epoch. Wall time is intentionally absent (it is the one
/// nondeterministic quantity); summaries carry it.
pub fn write_trace_csv(path: &Path, trace: &TrainingTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_COLUMNS)?;
    for r in &trace.records {
        w.write_record([
            r.stage.to_string(),
            r.resolution.to_string(),
            r.epoch.to_string(),
            format!("{}", r.train_loss),
            format!("{}", r.val_loss),
            format!("{}", r.grad_norm_sq),
            format!("{}", r.grad_variance),
            format!("{}", r.grad_entropy),
            format!("{}", r.param_delta_norm),
            r.cum_macs.to_string(),
            (r.fired as u8).to_string(),
            r.transitioned.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<TrainingTrace> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != TRACE_COLUMNS.len() {
            return Err(Error::Format(format!("trace row with {} fields", row.len())));
        }
        let stage = match &row[0] {
            "full" => Stage::Full,
            "low" => Stage::Low,
            other => return Err(Error::Format(format!("bad stage '{other}'"))),
        };
        let parse = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad float in trace column {i}")))
        };
        records.push(EpochRecord {
            stage,
            resolution: row[1].parse().map_err(|_| Error::Format("bad resolution".into()))?,
            epoch: row[2].parse().map_err(|_| Error::Format("bad epoch".into()))?,
            train_loss: parse(3)?,
            val_loss: parse(4)?,
            grad_norm_sq: parse(5)?,
            grad_variance: parse(6)?,
            grad_entropy: parse(7)?,
            param_delta_norm: parse(8)?,
            wall_secs: 0.0,
            cum_macs: row[9].parse().map_err(|_| Error::Format("bad macs".into()))?,
            fired: &row[10] == "1",
            transitioned: if row[11].is_empty() { None } else { Some(row[11].to_string()) },
        });
    }
    Ok(TrainingTrace { records, events: Vec::new() })
}

/// Minimal per-epoch view kept in run summaries so paired runs can be
/// compared without their full traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochPoint {
    pub stage: Stage,
    pub resolution: usize,
    pub epoch: usize,
    pub val_loss: f64,
    pub cum_macs: u64,
    pub wall_secs: f64,
}

/// Everything `train` reports about one finished run. Unlike the trace
/// CSV and checkpoints, the summary carries wall-clock times and is not
/// expected to be byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// "mrtl" or "fixed".
    pub mode: String,
    pub task: TaskKind,
    pub config_hash: String,
    pub seed: u64,
    pub data_seed: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub test_loss: f64,
    pub f1_val: Option<f64>,
    pub f1_test: Option<f64>,
    pub cp_fit: Option<f64>,
    pub total_macs: u64,
    pub total_wall_secs: f64,
    pub per_resolution: Vec<ResolutionCost>,
    pub epochs: Vec<EpochPoint>,
    pub transitions: Vec<TransitionCheck>,
    pub events: Vec<String>,
}

impl RunSummary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Rebuilds the minimal trace the speedup report needs.
    pub fn to_trace(&self) -> TrainingTrace {
        let records = self
            .epochs
            .iter()
            .map(|e| EpochRecord {
                stage: e.stage,
                resolution: e.resolution,
                epoch: e.epoch,
                train_loss: f64::NAN,
                val_loss: e.val_loss,
                grad_norm_sq: 0.0,
                grad_variance: 0.0,
                grad_entropy: 0.0,
                param_delta_norm: 0.0,
                wall_secs: e.wall_secs,
                cum_macs: e.cum_macs,
                fired: false,
                transitioned: None,
            })
            .collect();
        TrainingTrace { records, events: self.events.clone() }
    }
}

/// Plain (P2) grayscale PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArg(format!(
            "{} pixels for {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Maps a factor column to gray levels: sign-canonicalized, then linear
/// from [-max|.|, +max|.|] to [0, 255].
pub fn column_to_pixels(column: &[f64]) -> Vec<u8> {
    let mut col = column.to_vec();
    crate::diagnostics::sign_canonicalize(&mut col);
    let max_abs = col.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if max_abs == 0.0 {
        return vec![128; col.len()];
    }
    col.iter()
        .map(|&v| {
            let unit = (v + max_abs) / (2.0 * max_abs);
            (unit * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    #[test]
    fn tensor_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mrtn");
        let t = DenseTensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.125]).unwrap();
        write_tensor_file(&path, &t).unwrap();
        let back = read_tensor_file(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tensor_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mrtn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_tensor_file(&path).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_low_rank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        let factors = vec![
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Matrix::from_vec(3, 2, vec![0.1; 6]).unwrap(),
            Matrix::from_vec(4, 2, vec![-0.5; 8]).unwrap(),
        ];
        let m = LowRankModel::new(factors, vec![0.25, -0.75], Activation::Sigmoid).unwrap();
        write_checkpoint(&path, &ModelKind::Low(m.clone()), 1, &[2, 2], 42, "abc").unwrap();
        let (header, back) = read_checkpoint(&path).unwrap();
        assert_eq!(header.rank, Some(2));
        assert_eq!(header.grid_dims, vec![2, 2]);
        match back {
            ModelKind::Low(lm) => {
                assert_eq!(lm.bias, m.bias);
                for (a, b) in lm.factors.iter().zip(&m.factors) {
                    assert_eq!(a.data(), b.data());
                }
            }
            _ => panic!("wrong checkpoint kind"),
        }
    }

    #[test]
    fn trace_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = TrainingTrace {
            records: vec![EpochRecord {
                stage: Stage::Low,
                resolution: 2,
                epoch: 5,
                train_loss: 0.125,
                val_loss: 0.5,
                grad_norm_sq: 1e-8,
                grad_variance: 2.5e-9,
                grad_entropy: 3.21,
                param_delta_norm: 0.007,
                wall_secs: 9.0,
                cum_macs: 123456,
                fired: true,
                transitioned: Some("val_loss".into()),
            }],
            events: vec![],
        };
        write_trace_csv(&path, &trace).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back.records.len(), 1);
        let r = &back.records[0];
        assert_eq!(r.val_loss.to_bits(), 0.5f64.to_bits());
        assert_eq!(r.cum_macs, 123456);
        assert!(r.fired);
        assert_eq!(r.transitioned.as_deref(), Some("val_loss"));
    }

    #[test]
    fn pgm_constant_positive_is_white() {
        let px = column_to_pixels(&[2.0, 2.0, 2.0]);
        assert_eq!(px, vec![255, 255, 255]);
    }

    #[test]
    fn pgm_negated_column_identical() {
        let a = column_to_pixels(&[0.5, -1.0, 0.25]);
        let b = column_to_pixels(&[-0.5, 1.0, -0.25]);
        assert_eq!(a, b);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = Matrix::from_vec(2, 3, vec![1.0, -2.5, 3.0, 0.0, 4.25, -1.0]).unwrap();
        write_matrix_csv(&path, &m).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(back.data(), m.data());
    }
}
