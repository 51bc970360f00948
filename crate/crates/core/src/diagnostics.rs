//! Interpretability and theory diagnostics: spatial auto-correlation of
//! factor columns, paired-run speedup reports, and contraction estimates
//! from training traces.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::reg::build_rbf_kernel;
use crate::train::{Stage, TrainingTrace};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy)]
pub enum Neighborhood {
    /// Axis-aligned adjacency (4 neighbors on a 2D grid), unit weights.
    Rook,
    /// RBF kernel weights with a zero diagonal; shares geometry with the
    /// regularizer.
    Rbf { sigma: f64 },
}

/// Classical Moran's I over a gridded field. Errors on a constant field
/// (zero variance leaves the statistic undefined).
pub fn morans_i(field: &[f64], g: &GridSpec, neighborhood: Neighborhood) -> Result<f64> {
    let n = g.cell_count();
    if field.len() != n {
        return Err(Error::ShapeMismatch { mode: 0, left: field.len(), right: n });
    }
    let mean = field.iter().sum::<f64>() / n as f64;
    let den: f64 = field.iter().map(|v| (v - mean) * (v - mean)).sum();
    if den == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mut num = 0.0;
    let mut w_sum = 0.0;
    match neighborhood {
        Neighborhood::Rook => {
            for cell in 0..n {
                let coords = g.cell_coords(cell);
                for axis in 0..g.n_axes() {
                    for dir in [-1isize, 1] {
                        let c = coords[axis] as isize + dir;
                        if c < 0 || c as usize >= g.dims[axis] {
                            continue;
                        }
                        let mut nc = coords.clone();
                        nc[axis] = c as usize;
                        let j = g.cell_index(&nc);
                        num += (field[cell] - mean) * (field[j] - mean);
                        w_sum += 1.0;
                    }
                }
            }
        }
        Neighborhood::Rbf { sigma } => {
            let kernel = build_rbf_kernel(g, sigma, 0.0)?;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = kernel.entry(i, j);
                    num += w * (field[i] - mean) * (field[j] - mean);
                    w_sum += w;
                }
            }
        }
    }
    if w_sum == 0.0 {
        return Err(Error::InvalidArg("no neighbor weights".into()));
    }
    Ok((n as f64 / w_sum) * (num / den))
}

/// Flips a factor column in place so its largest-magnitude entry is
/// positive (display convention).
pub fn sign_canonicalize(column: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &v in column.iter() {
        if v.abs() > best {
            best = v.abs();
            sign = if v >= 0.0 { 1.0 } else { -1.0 };
        }
    }
    if sign < 0.0 {
        for v in column.iter_mut() {
            *v = -*v;
        }
    }
}

/// Binary F1 at threshold 0.5 over prediction/label pairs. `None` when no
/// positives exist in either predictions or labels.
pub fn f1_score(preds: &[f64], labels: &[f64]) -> Option<f64> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        let hat = p >= 0.5;
        let pos = y == 1.0;
        match (hat, pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Cost of one run at its first crossing of the target loss.
#[derive(Debug, Clone, Serialize)]
pub struct Crossing {
    pub record_index: usize,
    pub macs: u64,
    pub wall_secs: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolutionCost {
    pub stage: Stage,
    pub level: usize,
    pub epochs: usize,
    pub macs: u64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunCost {
    pub total_macs: u64,
    pub total_wall_secs: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub crossing: Option<Crossing>,
    pub breakdown: Vec<ResolutionCost>,
}

/// Paired-run comparison at a target validation loss. Ratios are
/// fixed-cost over mrtl-cost at each run's first crossing; `None` when
/// either run never reaches the target.
#[derive(Debug, Clone, Serialize)]
pub struct SpeedupReport {
    pub target_loss: f64,
    pub mrtl: RunCost,
    pub fixed: RunCost,
    pub mac_ratio: Option<f64>,
    pub wall_ratio: Option<f64>,
}

fn run_cost(trace: &TrainingTrace, target_loss: f64) -> RunCost {
    let mut breakdown: Vec<ResolutionCost> = Vec::new();
    let mut crossing = None;
    let mut wall_cum = 0.0;
    let mut prev_macs = 0u64;
    let mut best = f64::INFINITY;
    for (i, r) in trace.records.iter().enumerate() {
        wall_cum += r.wall_secs;
        let macs_delta = r.cum_macs - prev_macs;
        prev_macs = r.cum_macs;
        best = best.min(r.val_loss);
        match breakdown.last_mut() {
            Some(b) if b.stage == r.stage && b.level == r.resolution => {
                b.epochs += 1;
                b.macs += macs_delta;
                b.wall_secs += r.wall_secs;
            }
            _ => breakdown.push(ResolutionCost {
                stage: r.stage,
                level: r.resolution,
                epochs: 1,
                macs: macs_delta,
                wall_secs: r.wall_secs,
            }),
        }
        if crossing.is_none() && r.val_loss <= target_loss {
            crossing = Some(Crossing {
                record_index: i,
                macs: r.cum_macs,
                wall_secs: wall_cum,
                val_loss: r.val_loss,
            });
        }
    }
    RunCost {
        total_macs: trace.total_macs(),
        total_wall_secs: trace.total_wall_secs(),
        final_val_loss: trace.final_val_loss().unwrap_or(f64::NAN),
        best_val_loss: best,
        crossing,
        breakdown,
    }
}

pub fn speedup_report(
    trace_mrtl: &TrainingTrace,
    trace_fixed: &TrainingTrace,
    target_loss: f64,
) -> SpeedupReport {
    let mrtl = run_cost(trace_mrtl, target_loss);
    let fixed = run_cost(trace_fixed, target_loss);
    let (mac_ratio, wall_ratio) = match (&mrtl.crossing, &fixed.crossing) {
        (Some(m), Some(f)) => (
            Some(f.macs as f64 / m.macs.max(1) as f64),
            Some(f.wall_secs / m.wall_secs.max(1e-12)),
        ),
        _ => (None, None),
    };
    SpeedupReport { target_loss, mrtl, fixed, mac_ratio, wall_ratio }
}

/// Median ratio of successive delta norms, clamped into (0, 1). Needs at
/// least two ratios (three deltas).
pub fn estimate_from_deltas(deltas: &[f64]) -> Result<f64> {
    let mut ratios = Vec::new();
    for w in deltas.windows(2) {
        if w[0] > 0.0 {
            ratios.push(w[1] / w[0]);
        }
    }
    if ratios.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "{} delta ratios are not enough to estimate a contraction factor",
            ratios.len()
        )));
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let mid = ratios.len() / 2;
    let median = if ratios.len() % 2 == 1 {
        ratios[mid]
    } else {
        0.5 * (ratios[mid - 1] + ratios[mid])
    };
    Ok(median.clamp(1e-9, 1.0 - 1e-9))
}

/// Contraction factor of the longest single-resolution segment of a trace
/// (at least 6 epochs).
pub fn contraction_estimate(trace: &TrainingTrace) -> Result<f64> {
    let mut best: Option<(usize, usize)> = None; // (start, len)
    let mut start = 0usize;
    for i in 1..=trace.records.len() {
        let boundary = i == trace.records.len()
            || trace.records[i].resolution != trace.records[start].resolution
            || trace.records[i].stage != trace.records[start].stage;
        if boundary {
            let len = i - start;
            if best.is_none_or(|(_, blen)| len > blen) {
                best = Some((start, len));
            }
            start = i;
        }
    }
    let (s, len) = best.ok_or_else(|| Error::InvalidArg("empty trace".into()))?;
    if len < 6 {
        return Err(Error::InvalidArg(format!(
            "longest resolution segment has {len} epochs; need at least 6"
        )));
    }
    let deltas: Vec<f64> = trace.records[s..s + len].iter().map(|r| r.param_delta_norm).collect();
    estimate_from_deltas(&deltas)
}

/// Theoretical multiresolution speedup factor `ln(1 / ((1 - gamma) eps))`.
pub fn theoretical_speedup_factor(gamma: f64, epsilon: f64) -> f64 {
    (1.0 / ((1.0 - gamma) * epsilon)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochRecord;

    fn record(stage: Stage, level: usize, val: f64, delta: f64, macs: u64) -> EpochRecord {
        EpochRecord {
            stage,
            resolution: level,
            epoch: 0,
            train_loss: 0.0,
            val_loss: val,
            grad_norm_sq: 0.0,
            grad_variance: 0.0,
            grad_entropy: 0.0,
            param_delta_norm: delta,
            wall_secs: 1.0,
            cum_macs: macs,
            fired: false,
            transitioned: None,
        }
    }

    /// Direct textbook double-sum evaluation.
    fn moran_oracle(field: &[f64], g: &GridSpec) -> f64 {
        let n = field.len();
        let mean = field.iter().sum::<f64>() / n as f64;
        let mut num = 0.0;
        let mut wsum = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            den += (field[i] - mean) * (field[i] - mean);
            for j in 0..n {
                let ci = g.cell_coords(i);
                let cj = g.cell_coords(j);
                let dist: usize = ci.iter().zip(&cj).map(|(a, b)| a.abs_diff(*b)).sum();
                let axes_differ = ci.iter().zip(&cj).filter(|(a, b)| a != b).count();
                if dist == 1 && axes_differ == 1 {
                    num += (field[i] - mean) * (field[j] - mean);
                    wsum += 1.0;
                }
            }
        }
        (n as f64 / wsum) * (num / den)
    }

    #[test]
    fn moran_matches_textbook_formula_1d() {
        let g = GridSpec::unit(vec![4]).unwrap();
        let field = [1.0, 1.0, 2.0, 2.0];
        let got = morans_i(&field, &g, Neighborhood::Rook).unwrap();
        let want = moran_oracle(&field, &g);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn moran_checkerboard_is_minus_one() {
        let g = GridSpec::unit(vec![2, 2]).unwrap();
        let field = [1.0, -1.0, -1.0, 1.0];
        let got = morans_i(&field, &g, Neighborhood::Rook).unwrap();
        assert!((got + 1.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn moran_constant_field_errors() {
        let g = GridSpec::unit(vec![3]).unwrap();
        assert!(matches!(
            morans_i(&[2.0, 2.0, 2.0], &g, Neighborhood::Rook),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn moran_affine_invariant() {
        let g = GridSpec::unit(vec![3, 3]).unwrap();
        let field: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = morans_i(&field, &g, Neighborhood::Rook).unwrap();
        let scaled: Vec<f64> = field.iter().map(|v| 3.5 * v + 11.0).collect();
        let b = morans_i(&scaled, &g, Neighborhood::Rook).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn moran_rbf_neighborhood_works() {
        let g = GridSpec::unit(vec![3, 3]).unwrap();
        let smooth: Vec<f64> = (0..9).map(|i| (i / 3) as f64).collect();
        let i_stat = morans_i(&smooth, &g, Neighborhood::Rbf { sigma: 0.1 }).unwrap();
        assert!(i_stat > 0.0);
    }

    #[test]
    fn speedup_identical_traces_ratio_one() {
        let trace = TrainingTrace {
            records: vec![
                record(Stage::Full, 0, 1.0, 1.0, 100),
                record(Stage::Full, 0, 0.5, 1.0, 200),
            ],
            events: vec![],
        };
        let rep = speedup_report(&trace, &trace, 0.6);
        assert_eq!(rep.mac_ratio, Some(1.0));
        assert_eq!(rep.wall_ratio, Some(1.0));
    }

    #[test]
    fn speedup_doubled_macs_ratio_two() {
        let mrtl = TrainingTrace {
            records: vec![
                record(Stage::Full, 0, 1.0, 1.0, 100),
                record(Stage::Full, 0, 0.5, 1.0, 200),
            ],
            events: vec![],
        };
        let fixed = TrainingTrace {
            records: vec![
                record(Stage::Full, 0, 1.0, 1.0, 200),
                record(Stage::Full, 0, 0.5, 1.0, 400),
            ],
            events: vec![],
        };
        let rep = speedup_report(&mrtl, &fixed, 0.6);
        assert_eq!(rep.mac_ratio, Some(2.0));
    }

    #[test]
    fn speedup_swap_inverts_ratio() {
        let a = TrainingTrace {
            records: vec![record(Stage::Full, 0, 0.4, 1.0, 300)],
            events: vec![],
        };
        let b = TrainingTrace {
            records: vec![record(Stage::Full, 0, 0.4, 1.0, 750)],
            events: vec![],
        };
        let r1 = speedup_report(&a, &b, 0.5).mac_ratio.unwrap();
        let r2 = speedup_report(&b, &a, 0.5).mac_ratio.unwrap();
        assert!((r1 * r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn speedup_noncrossing_reports_best() {
        let mrtl = TrainingTrace {
            records: vec![record(Stage::Full, 0, 0.9, 1.0, 100)],
            events: vec![],
        };
        let rep = speedup_report(&mrtl, &mrtl, 0.1);
        assert!(rep.mac_ratio.is_none());
        assert!((rep.mrtl.best_val_loss - 0.9).abs() < 1e-12);
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let trace = TrainingTrace {
            records: vec![
                record(Stage::Full, 0, 1.0, 1.0, 50),
                record(Stage::Full, 0, 0.8, 1.0, 110),
                record(Stage::Low, 1, 0.6, 1.0, 400),
                record(Stage::Low, 2, 0.5, 1.0, 900),
            ],
            events: vec![],
        };
        let cost = run_cost(&trace, 0.0);
        let macs: u64 = cost.breakdown.iter().map(|b| b.macs).sum();
        let wall: f64 = cost.breakdown.iter().map(|b| b.wall_secs).sum();
        assert_eq!(macs, cost.total_macs);
        assert!((wall - cost.total_wall_secs).abs() < 1e-12);
        assert_eq!(cost.breakdown.len(), 3);
    }

    #[test]
    fn contraction_from_geometric_deltas() {
        let deltas: Vec<f64> = (0..6).map(|i| 0.5f64.powi(i)).collect();
        let g = estimate_from_deltas(&deltas).unwrap();
        assert!((g - 0.5).abs() < 1e-12);
    }

    #[test]
    fn contraction_median_rule() {
        // Successive ratios 0.4, 0.5, 0.6 -> median 0.5.
        let deltas = [1.0, 0.4, 0.2, 0.12];
        let g = estimate_from_deltas(&deltas).unwrap();
        assert!((g - 0.5).abs() < 1e-12);
    }

    #[test]
    fn contraction_needs_enough_epochs() {
        let trace = TrainingTrace {
            records: (0..5).map(|i| record(Stage::Full, 0, 1.0, 0.5f64.powi(i), 0)).collect(),
            events: vec![],
        };
        assert!(contraction_estimate(&trace).is_err());
        let trace6 = TrainingTrace {
            records: (0..6).map(|i| record(Stage::Full, 0, 1.0, 0.5f64.powi(i), 0)).collect(),
            events: vec![],
        };
        assert!((contraction_estimate(&trace6).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f1_basics() {
        assert_eq!(f1_score(&[0.9, 0.1], &[1.0, 0.0]), Some(1.0));
        assert_eq!(f1_score(&[0.1, 0.1], &[0.0, 0.0]), None);
        let f1 = f1_score(&[0.9, 0.9, 0.1], &[1.0, 0.0, 1.0]).unwrap();
        assert!((f1 - 0.5).abs() < 1e-12);
    }
}
