//! Training driver: full-rank multiresolution stage, CP handoff, low-rank
//! multiresolution stage, plus the fixed-resolution baseline and the
//! finegraining criteria that decide when to move up the ladder.

use crate::cp::{cp_als, AlsConfig};
use crate::data::Dataset;
use crate::diagnostics::estimate_from_deltas;
use crate::error::{Error, Result};
use crate::interp::{build_multilinear, build_nearest, finegrain_factor, finegrain_full, InterpOperator, Scheme};
use crate::model::{
    backward_full, backward_low, forward_full, forward_low, Activation, Batch, FullRankModel,
    LossKind, LowRankModel,
};
use crate::optim::{OptimConfig, OptimState};
use crate::reg::{build_rbf_kernel, objective, RegConfig, RegGrads, RegTarget, SpatialKernel};
use crate::tensor::{DenseTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Full,
    Low,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Full => write!(f, "full"),
            Stage::Low => write!(f, "low"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    ValLoss,
    GradNorm,
    GradVar,
    GradEntropy,
    ContractionDelta,
}

impl std::fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CriterionKind::ValLoss => "val_loss",
            CriterionKind::GradNorm => "grad_norm",
            CriterionKind::GradVar => "grad_var",
            CriterionKind::GradEntropy => "grad_entropy",
            CriterionKind::ContractionDelta => "contraction_delta",
        };
        write!(f, "{s}")
    }
}

/// Per-resolution stopping rule. A statistic "fires" in an epoch when it
/// increased by more than `tau` over the previous epoch at the same
/// resolution (for `contraction_delta`, when the parameter-delta norm
/// falls below the theoretical threshold); training moves on after
/// `patience` fires, not necessarily consecutive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinegrainCriterion {
    pub kind: CriterionKind,
    pub patience: usize,
    pub tau: f64,
    /// Constant in the `contraction_delta` threshold `c0 D_r / (g (1-g))`.
    pub c0: f64,
}

impl Default for FinegrainCriterion {
    fn default() -> Self {
        FinegrainCriterion { kind: CriterionKind::ValLoss, patience: 4, tau: 0.0, c0: 1e-6 }
    }
}

impl FinegrainCriterion {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidArg("patience must be >= 1".into()));
        }
        if self.kind == CriterionKind::ContractionDelta && self.c0 <= 0.0 {
            return Err(Error::InvalidArg("c0 must be positive for contraction_delta".into()));
        }
        Ok(())
    }
}

/// One epoch of the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// Ladder level index.
    pub resolution: usize,
    /// Epoch number within this resolution.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean squared gradient norm over the epoch's minibatches.
    pub grad_norm_sq: f64,
    /// Mean coordinate-wise variance of minibatch gradients.
    pub grad_variance: f64,
    /// Entropy of the normalized absolute epoch-mean gradient.
    pub grad_entropy: f64,
    /// Parameter movement over the epoch.
    pub param_delta_norm: f64,
    /// Wall time is kept out of the CSV export so traces stay reproducible;
    /// the run summary carries it instead.
    #[serde(skip)]
    pub wall_secs: f64,
    pub cum_macs: u64,
    /// Criterion fired in this epoch.
    pub fired: bool,
    /// Set on the epoch that triggered a transition (criterion name, or
    /// "max_epochs" / "schedule").
    pub transitioned: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
    /// Warnings such as a CP fit below the configured floor.
    pub events: Vec<String>,
}

impl TrainingTrace {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_loss)
    }

    pub fn total_macs(&self) -> u64 {
        self.records.last().map(|r| r.cum_macs).unwrap_or(0)
    }

    pub fn total_wall_secs(&self) -> f64 {
        self.records.iter().map(|r| r.wall_secs).sum()
    }
}

/// Cross-resolution consistency probe recorded at every transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionCheck {
    pub kind: TransitionKind,
    pub from_level: usize,
    pub to_level: usize,
    pub stage: Stage,
    pub val_before: f64,
    pub val_after: f64,
    /// Median relative per-prediction change over the validation set.
    pub median_rel_output_change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Finegrain,
    Decompose,
}

/// Statistics the finegraining criteria consume, computed per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub grad_norm_sq: f64,
    pub grad_variance: f64,
    pub grad_entropy: f64,
}

/// Streaming accumulator over the epoch's minibatch gradients; equivalent
/// to [`epoch_stats`] on the stored list, without storing it.
#[derive(Debug, Clone)]
pub struct GradAccum {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    sum_norm_sq: f64,
}

impl GradAccum {
    pub fn new(dim: usize) -> Self {
        GradAccum { n: 0, sum: vec![0.0; dim], sum_sq: vec![0.0; dim], sum_norm_sq: 0.0 }
    }

    pub fn push(&mut self, grad: &[f64]) {
        debug_assert_eq!(grad.len(), self.sum.len());
        self.n += 1;
        let mut norm_sq = 0.0;
        for (i, &g) in grad.iter().enumerate() {
            self.sum[i] += g;
            self.sum_sq[i] += g * g;
            norm_sq += g * g;
        }
        self.sum_norm_sq += norm_sq;
    }

    pub fn finalize(&self) -> Result<EpochStats> {
        if self.n == 0 {
            return Err(Error::InvalidArg("empty epoch: no gradient samples".into()));
        }
        let n = self.n as f64;
        let dim = self.sum.len() as f64;
        let mut var_sum = 0.0;
        let mut abs_mean_sum = 0.0;
        for i in 0..self.sum.len() {
            let mean = self.sum[i] / n;
            var_sum += (self.sum_sq[i] / n - mean * mean).max(0.0);
            abs_mean_sum += mean.abs();
        }
        let mut entropy = 0.0;
        if abs_mean_sum > 0.0 {
            for s in &self.sum {
                let p = (s / n).abs() / abs_mean_sum;
                if p > 0.0 {
                    entropy -= p * p.ln();
                }
            }
        }
        Ok(EpochStats {
            grad_norm_sq: self.sum_norm_sq / n,
            grad_variance: var_sum / dim,
            grad_entropy: entropy,
        })
    }
}

/// Criterion statistics from an explicit list of minibatch gradients.
pub fn epoch_stats(grads: &[Vec<f64>]) -> Result<EpochStats> {
    if grads.is_empty() {
        return Err(Error::InvalidArg("empty epoch: no gradient samples".into()));
    }
    let mut acc = GradAccum::new(grads[0].len());
    for g in grads {
        acc.push(g);
    }
    acc.finalize()
}

fn stat_of(record: &EpochRecord, kind: CriterionKind) -> f64 {
    match kind {
        CriterionKind::ValLoss => record.val_loss,
        CriterionKind::GradNorm => record.grad_norm_sq,
        CriterionKind::GradVar => record.grad_variance,
        CriterionKind::GradEntropy => record.grad_entropy,
        CriterionKind::ContractionDelta => record.param_delta_norm,
    }
}

/// Whether the criterion fires at record `records[at]`, given the records
/// of the current resolution only.
fn fired_at(records: &[EpochRecord], at: usize, criterion: &FinegrainCriterion, d_r: usize) -> bool {
    match criterion.kind {
        CriterionKind::ContractionDelta => {
            // Needs a contraction estimate from earlier deltas.
            if at < 2 {
                return false;
            }
            let lo = at.saturating_sub(5);
            let deltas: Vec<f64> = records[lo..=at].iter().map(|r| r.param_delta_norm).collect();
            let Ok(gamma) = estimate_from_deltas(&deltas) else {
                return false;
            };
            let threshold = criterion.c0 * d_r as f64 / (gamma * (1.0 - gamma));
            records[at].param_delta_norm <= threshold
        }
        kind => {
            if at == 0 {
                return false;
            }
            stat_of(&records[at], kind) - stat_of(&records[at - 1], kind) > criterion.tau
        }
    }
}

/// Decision rule over the current resolution's records: move on once the
/// criterion fired in at least `patience` epochs (two epochs minimum).
pub fn should_finegrain(
    records: &[EpochRecord],
    criterion: &FinegrainCriterion,
    d_r: usize,
) -> bool {
    if records.len() < 2 {
        return false;
    }
    let fires = (0..records.len()).filter(|&i| fired_at(records, i, criterion, d_r)).count();
    fires >= criterion.patience
}

/// Either model parameterization, with a flat-parameter view for the
/// optimizer.
#[derive(Debug, Clone)]
pub enum ModelKind {
    Full(FullRankModel),
    Low(LowRankModel),
}

impl ModelKind {
    pub fn n_params(&self) -> usize {
        match self {
            ModelKind::Full(m) => m.w.len() + m.bias.len(),
            ModelKind::Low(m) => {
                m.factors.iter().map(|f| f.data().len()).sum::<usize>() + m.bias.len()
            }
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            ModelKind::Full(_) => Stage::Full,
            ModelKind::Low(_) => Stage::Low,
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        match self {
            ModelKind::Full(m) => {
                out.extend_from_slice(m.w.data());
                out.extend_from_slice(&m.bias);
            }
            ModelKind::Low(m) => {
                for f in &m.factors {
                    out.extend_from_slice(f.data());
                }
                out.extend_from_slice(&m.bias);
            }
        }
        out
    }

    pub fn apply_delta(&mut self, delta: &[f64]) {
        let mut off = 0;
        match self {
            ModelKind::Full(m) => {
                for v in m.w.data_mut() {
                    *v += delta[off];
                    off += 1;
                }
                for b in &mut m.bias {
                    *b += delta[off];
                    off += 1;
                }
            }
            ModelKind::Low(m) => {
                for f in &mut m.factors {
                    for v in f.data_mut() {
                        *v += delta[off];
                        off += 1;
                    }
                }
                for b in &mut m.bias {
                    *b += delta[off];
                    off += 1;
                }
            }
        }
        debug_assert_eq!(off, delta.len());
    }

    pub fn forward(&self, b: &Batch) -> Result<(Vec<f64>, u64)> {
        match self {
            ModelKind::Full(m) => forward_full(m, b),
            ModelKind::Low(m) => forward_low(m, b),
        }
    }
}

pub struct StepInfo {
    pub data_loss: f64,
    pub objective: f64,
    pub grad_flat: Vec<f64>,
    pub macs: u64,
}

/// One minibatch update of the combined objective with the configured
/// optimizer. Errors out on a non-finite gradient.
pub fn step(
    model: &mut ModelKind,
    batch: &Batch,
    loss: &LossKind,
    state: &mut OptimState,
    lr: f64,
    reg_cfg: &RegConfig,
    kernels: &[SpatialKernel],
) -> Result<StepInfo> {
    if lr <= 0.0 {
        return Err(Error::InvalidArg("learning rate must be positive".into()));
    }
    let (data_loss, obj_value, grad_flat, macs) = match model {
        ModelKind::Full(m) => {
            let (loss_v, _, grads, macs) = backward_full(m, batch, loss)?;
            let spatial_modes = m.spatial_modes();
            let (obj, reg_grads) = objective(
                loss_v,
                RegTarget::Full { w: &m.w, spatial_modes: &spatial_modes },
                reg_cfg,
                kernels,
            )?;
            let mut flat = Vec::with_capacity(m.w.len() + m.bias.len());
            match reg_grads {
                RegGrads::Full(rg) => {
                    for (g, r) in grads.w.data().iter().zip(rg.data()) {
                        flat.push(g + r);
                    }
                }
                RegGrads::Factors(_) => unreachable!("full target yields full grads"),
            }
            flat.extend_from_slice(&grads.bias);
            (loss_v, obj, flat, macs)
        }
        ModelKind::Low(m) => {
            let (loss_v, _, grads, macs) = backward_low(m, batch, loss)?;
            let spatial = m.spatial_factor_indices();
            let (obj, reg_grads) = objective(
                loss_v,
                RegTarget::Factors { factors: &m.factors, spatial: &spatial },
                reg_cfg,
                kernels,
            )?;
            let mut flat = Vec::with_capacity(model.n_params());
            match reg_grads {
                RegGrads::Factors(rgs) => {
                    for (g, rg) in grads.factors.iter().zip(&rgs) {
                        for (a, b) in g.data().iter().zip(rg.data()) {
                            flat.push(a + b);
                        }
                    }
                }
                RegGrads::Full(_) => unreachable!("factor target yields factor grads"),
            }
            flat.extend_from_slice(&grads.bias);
            (loss_v, obj, flat, macs)
        }
    };
    if !grad_flat.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("minibatch gradient".into()));
    }
    let mut delta = vec![0.0; grad_flat.len()];
    state.update(&grad_flat, lr, &mut delta);
    model.apply_delta(&delta);
    Ok(StepInfo { data_loss, objective: obj_value, grad_flat, macs })
}

/// Initialization of the low-rank stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Algorithm default: train full rank, decompose, continue low rank.
    FullRankCp,
    /// Skip the full-rank stage; seed the factors randomly (the
    /// interpretability baseline).
    RandomLowRank,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub activation: Activation,
    pub loss: LossKind,
    pub rank: usize,
    pub optim: OptimConfig,
    pub reg: RegConfig,
    /// Low-rank stage override for `lambda_r`; falls back to `reg.lambda_r`.
    pub lambda_r_low_rank: Option<f64>,
    pub criterion: FinegrainCriterion,
    pub scheme: Scheme,
    pub cp_max_iters: usize,
    pub cp_fit_tol: f64,
    /// A CP fit below this raises a warning event in the trace.
    pub cp_fit_floor: f64,
    pub init: InitKind,
    /// Forced epochs per plan entry (budget replay); overrides criteria.
    pub epoch_schedule: Option<Vec<usize>>,
}

impl TrainSettings {
    pub fn defaults_for(task_loss: LossKind, activation: Activation, rank: usize) -> Self {
        TrainSettings {
            activation,
            loss: task_loss,
            rank,
            optim: OptimConfig::default(),
            reg: RegConfig::default(),
            lambda_r_low_rank: None,
            criterion: FinegrainCriterion::default(),
            scheme: Scheme::Nearest,
            cp_max_iters: 200,
            cp_fit_tol: 1e-8,
            cp_fit_floor: 0.5,
            init: InitKind::FullRankCp,
            epoch_schedule: None,
        }
    }

    /// Regularization for one stage at one resolution. The raw spatial
    /// penalty is a double sum over location pairs, so its gradient grows
    /// with the cell count; rescaling the spatial weight by
    /// `(base_cells / cells)^2` keeps the penalty density constant across
    /// the ladder (exactly the configured weight at the coarsest level),
    /// so one `lambda_r` stays meaningful at every resolution.
    fn stage_reg(&self, stage: Stage, cells: usize, base_cells: usize) -> RegConfig {
        let mut reg = self.reg.clone();
        if stage == Stage::Low {
            if let Some(l) = self.lambda_r_low_rank {
                reg.lambda_r = l;
            }
        }
        let ratio = base_cells as f64 / cells as f64;
        reg.spatial_weight *= ratio * ratio;
        reg
    }
}

/// Everything needed to continue a run from a snapshot and reproduce the
/// remaining trace exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResumeMeta {
    /// Plan entry the snapshot was taken at the end of.
    pub plan_index: usize,
    /// Decay-clock position within the stage.
    pub stage_epoch: usize,
    /// Word position of the training RNG stream.
    pub rng_word_pos: u128,
    pub cum_macs: u64,
}

/// Model snapshot taken at every resolution transition and at the end.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub stage: Stage,
    pub level: usize,
    pub model: ModelKind,
    pub resume: ResumeMeta,
}

#[derive(Debug)]
pub struct RunResult {
    pub model: LowRankModel,
    /// Final full-rank model at the handoff resolution (absent for random
    /// init runs).
    pub full_rank: Option<FullRankModel>,
    pub trace: TrainingTrace,
    pub transitions: Vec<TransitionCheck>,
    pub snapshots: Vec<Snapshot>,
    pub cp_fit: Option<f64>,
    /// Epochs spent per plan entry, for budget replay.
    pub epochs_per_entry: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub level: usize,
    pub stage: Stage,
}

/// The multiresolution plan: full rank on levels `0..r0`, then low rank
/// from `r0-1` (the handoff resolution) to the top.
pub fn mrtl_plan(ladder_levels: usize, r0: usize) -> Vec<PlanEntry> {
    let mut plan: Vec<PlanEntry> =
        (0..r0).map(|level| PlanEntry { level, stage: Stage::Full }).collect();
    plan.extend((r0 - 1..ladder_levels).map(|level| PlanEntry { level, stage: Stage::Low }));
    plan
}

/// The fixed-resolution baseline: each stage trains only at its final
/// resolution.
pub fn fixed_plan(ladder_levels: usize, r0: usize) -> Vec<PlanEntry> {
    vec![
        PlanEntry { level: r0 - 1, stage: Stage::Full },
        PlanEntry { level: ladder_levels - 1, stage: Stage::Low },
    ]
}

pub fn run_mrtl(data: &Dataset, settings: &TrainSettings) -> Result<RunResult> {
    let plan = match settings.init {
        InitKind::FullRankCp => mrtl_plan(data.ladder.n_levels(), data.ladder.r0),
        InitKind::RandomLowRank => (data.ladder.r0 - 1..data.ladder.n_levels())
            .map(|level| PlanEntry { level, stage: Stage::Low })
            .collect(),
    };
    run_plan(data, &plan, settings)
}

pub fn run_fixed(data: &Dataset, settings: &TrainSettings) -> Result<RunResult> {
    if settings.init == InitKind::RandomLowRank {
        let plan = vec![PlanEntry { level: data.ladder.n_levels() - 1, stage: Stage::Low }];
        return run_plan(data, &plan, settings);
    }
    let plan = fixed_plan(data.ladder.n_levels(), data.ladder.r0);
    run_plan(data, &plan, settings)
}

/// Mean validation loss plus raw predictions on `indices` at `level`.
fn evaluate(
    model: &ModelKind,
    data: &Dataset,
    level: usize,
    indices: &[usize],
    loss: &LossKind,
) -> Result<(f64, Vec<f64>, u64)> {
    let batch = data.make_batch(level, indices)?;
    let (preds, macs) = model.forward(&batch)?;
    let value = crate::model::loss_value(loss, &preds, &batch)?;
    Ok((value, preds, macs))
}

fn build_operator(
    scheme: Scheme,
    coarse: &crate::grid::GridSpec,
    fine: &crate::grid::GridSpec,
) -> Result<InterpOperator> {
    match scheme {
        Scheme::Nearest => build_nearest(coarse, fine),
        Scheme::Multilinear => build_multilinear(coarse, fine),
    }
}

fn median_rel_change(before: &[f64], after: &[f64]) -> f64 {
    let mut rel: Vec<f64> = before
        .iter()
        .zip(after)
        .map(|(b, a)| (a - b).abs() / b.abs().max(1e-9))
        .collect();
    rel.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    if rel.is_empty() {
        0.0
    } else {
        rel[rel.len() / 2]
    }
}

/// Runs an explicit plan: per entry, epochs of minibatch training under
/// the finegraining criterion, with interpolation / decomposition at the
/// entry boundaries.
pub fn run_plan(data: &Dataset, plan: &[PlanEntry], settings: &TrainSettings) -> Result<RunResult> {
    run_plan_from(data, plan, settings, None)
}

/// [`run_plan`] continued from a snapshot: training restarts at the plan
/// entry after the snapshot (redoing its transition) and the remaining
/// trace is bit-identical to the original run's.
pub fn run_plan_from(
    data: &Dataset,
    plan: &[PlanEntry],
    settings: &TrainSettings,
    resume: Option<(ModelKind, ResumeMeta)>,
) -> Result<RunResult> {
    settings.optim.validate()?;
    settings.reg.validate()?;
    settings.criterion.validate()?;
    if plan.is_empty() {
        return Err(Error::InvalidArg("empty training plan".into()));
    }
    if let Some(schedule) = &settings.epoch_schedule {
        if schedule.len() != plan.len() {
            return Err(Error::InvalidArg(format!(
                "epoch schedule has {} entries for a {}-entry plan",
                schedule.len(),
                plan.len()
            )));
        }
    }
    let i_out = data.n_outputs;
    let f_in = data.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.optim.seed ^ 0x0074_7261_696e);

    let first = &plan[0];
    let mut model = match &resume {
        Some((m, meta)) => {
            if meta.plan_index >= plan.len() {
                return Err(Error::InvalidArg(format!(
                    "resume index {} outside the {}-entry plan",
                    meta.plan_index,
                    plan.len()
                )));
            }
            rng.set_word_pos(meta.rng_word_pos);
            m.clone()
        }
        None => match first.stage {
            Stage::Full => {
                let d0 = data.ladder.levels[first.level].cell_count();
                ModelKind::Full(FullRankModel::new(
                    DenseTensor::zeros(&[i_out, f_in, d0]),
                    vec![0.0; i_out],
                    settings.activation,
                    1,
                )?)
            }
            Stage::Low => {
                let d0 = data.ladder.levels[first.level].cell_count();
                let k = settings.rank;
                let mut factors = Vec::new();
                for rows in [i_out, f_in, d0] {
                    let mut m = Matrix::zeros(rows, k);
                    for v in m.data_mut() {
                        *v = rng.gen_range(-0.5..0.5);
                    }
                    factors.push(m);
                }
                ModelKind::Low(LowRankModel::new(factors, vec![0.0; i_out], settings.activation)?)
            }
        },
    };

    let mut trace = TrainingTrace::default();
    let mut transitions = Vec::new();
    let mut snapshots = Vec::new();
    let mut epochs_per_entry = Vec::with_capacity(plan.len());
    let mut cp_fit = None;
    let mut full_rank_final = None;
    let (start_index, resumed_at) = match &resume {
        Some((_, meta)) => (meta.plan_index, Some(meta.plan_index)),
        None => (0, None),
    };
    let mut cum_macs = resume.as_ref().map(|(_, m)| m.cum_macs).unwrap_or(0);
    // Decay clock, reset at the stage switch.
    let mut stage_epoch = resume.as_ref().map(|(_, m)| m.stage_epoch).unwrap_or(0);
    let mut prev_stage = plan[start_index].stage;

    for (pi, entry) in plan.iter().enumerate().skip(start_index) {
        let grid = &data.ladder.levels[entry.level];
        let d_r = grid.cell_count();
        let base_cells = data.ladder.levels[0].cell_count();
        let reg_cfg = settings.stage_reg(entry.stage, d_r, base_cells);
        if entry.stage != prev_stage {
            stage_epoch = 0;
        }
        prev_stage = entry.stage;

        // A resumed run re-enters at the snapshot's entry with training
        // there already done; only the transition remains.
        let train_here = resumed_at != Some(pi);
        let kernels: Vec<SpatialKernel> =
            if train_here && reg_cfg.lambda_r > 0.0 && reg_cfg.spatial_weight > 0.0 {
                vec![build_rbf_kernel(grid, reg_cfg.sigma, reg_cfg.sparsify_below)?]
            } else {
                Vec::new()
            };

        let mut state = OptimState::new(&settings.optim, model.n_params());
        let eta = settings.optim.stage_eta(entry.stage == Stage::Low);
        let level_start = trace.records.len();
        let max_epochs = settings
            .epoch_schedule
            .as_ref()
            .map(|s| s[pi])
            .unwrap_or(settings.optim.max_epochs_per_level);
        let mut epochs_here = 0usize;

        while train_here {
            let t0 = Instant::now();
            let lr = eta * settings.optim.lr_decay_gamma.powi(stage_epoch as i32);
            let mut train_idx = data.split.train.clone();
            for i in (1..train_idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                train_idx.swap(i, j);
            }
            let params_before = model.flatten_params();
            let mut accum = GradAccum::new(model.n_params());
            let mut train_loss_sum = 0.0;
            let mut n_batches = 0usize;
            for chunk in train_idx.chunks(settings.optim.batch_size) {
                let batch = data.make_batch(entry.level, chunk)?;
                let info = step(&mut model, &batch, &settings.loss, &mut state, lr, &reg_cfg, &kernels)?;
                cum_macs += info.macs;
                train_loss_sum += info.data_loss;
                accum.push(&info.grad_flat);
                n_batches += 1;
            }
            let stats = accum.finalize()?;
            let (val_loss, _, val_macs) =
                evaluate(&model, data, entry.level, &data.split.val, &settings.loss)?;
            cum_macs += val_macs;
            let params_after = model.flatten_params();
            let param_delta_norm = params_before
                .iter()
                .zip(&params_after)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();

            trace.records.push(EpochRecord {
                stage: entry.stage,
                resolution: entry.level,
                epoch: epochs_here,
                train_loss: train_loss_sum / n_batches as f64,
                val_loss,
                grad_norm_sq: stats.grad_norm_sq,
                grad_variance: stats.grad_variance,
                grad_entropy: stats.grad_entropy,
                param_delta_norm,
                wall_secs: t0.elapsed().as_secs_f64(),
                cum_macs,
                fired: false,
                transitioned: None,
            });
            let level_records = &trace.records[level_start..];
            let at = level_records.len() - 1;
            let fired = fired_at(level_records, at, &settings.criterion, d_r);
            trace.records.last_mut().expect("just pushed").fired = fired;

            epochs_here += 1;
            stage_epoch += 1;

            let reason = if settings.epoch_schedule.is_some() {
                if epochs_here >= max_epochs {
                    Some("schedule".to_string())
                } else {
                    None
                }
            } else if should_finegrain(&trace.records[level_start..], &settings.criterion, d_r) {
                Some(settings.criterion.kind.to_string())
            } else if epochs_here >= max_epochs {
                Some("max_epochs".to_string())
            } else {
                None
            };
            if let Some(reason) = reason {
                trace.records.last_mut().expect("non-empty").transitioned = Some(reason);
                break;
            }
        }
        epochs_per_entry.push(epochs_here);

        // Transition to the next plan entry.
        if pi + 1 < plan.len() {
            let next = &plan[pi + 1];
            snapshots.push(Snapshot {
                stage: entry.stage,
                level: entry.level,
                model: model.clone(),
                resume: ResumeMeta {
                    plan_index: pi,
                    stage_epoch,
                    rng_word_pos: rng.get_word_pos(),
                    cum_macs,
                },
            });
            let (val_before, preds_before, m0) =
                evaluate(&model, data, entry.level, &data.split.val, &settings.loss)?;
            cum_macs += m0;

            let kind = match (&model, next.stage) {
                (ModelKind::Full(_), Stage::Low) => TransitionKind::Decompose,
                _ => TransitionKind::Finegrain,
            };
            match kind {
                TransitionKind::Decompose => {
                    let ModelKind::Full(fm) = &model else { unreachable!() };
                    let cfg = AlsConfig {
                        rank: settings.rank,
                        max_iters: settings.cp_max_iters,
                        fit_tol: settings.cp_fit_tol,
                        seed: settings.optim.seed ^ 0xa15,
                    };
                    let (factors, fit) = cp_als(&fm.w, &cfg)?;
                    if fit < settings.cp_fit_floor {
                        trace.events.push(format!(
                            "cp fit {fit:.4} below floor {}",
                            settings.cp_fit_floor
                        ));
                    }
                    cp_fit = Some(fit);
                    full_rank_final = Some(fm.clone());
                    let mut low = LowRankModel::new(
                        factors.absorb_lambdas(),
                        fm.bias.clone(),
                        settings.activation,
                    )?;
                    // The fixed baseline hands off across a resolution
                    // jump; the spatial factors are interpolated up in one
                    // step.
                    if next.level != entry.level {
                        let coarse = &data.ladder.levels[entry.level];
                        let fine = &data.ladder.levels[next.level];
                        let op = build_operator(settings.scheme, coarse, fine)?;
                        for fi in low.spatial_factor_indices() {
                            low.factors[fi] = finegrain_factor(&low.factors[fi], &op)?;
                        }
                    }
                    model = ModelKind::Low(low);
                }
                TransitionKind::Finegrain => {
                    let coarse = &data.ladder.levels[entry.level];
                    let fine = &data.ladder.levels[next.level];
                    let op = build_operator(settings.scheme, coarse, fine)?;
                    match &mut model {
                        ModelKind::Full(fm) => {
                            fm.w = finegrain_full(&fm.w, &[(2, &op)])?;
                        }
                        ModelKind::Low(lm) => {
                            let idx = lm.spatial_factor_indices();
                            for fi in idx {
                                lm.factors[fi] = finegrain_factor(&lm.factors[fi], &op)?;
                            }
                        }
                    }
                }
            }
            let (val_after, preds_after, m1) =
                evaluate(&model, data, next.level, &data.split.val, &settings.loss)?;
            cum_macs += m1;
            transitions.push(TransitionCheck {
                kind,
                from_level: entry.level,
                to_level: next.level,
                stage: next.stage,
                val_before,
                val_after,
                median_rel_output_change: median_rel_change(&preds_before, &preds_after),
            });
        }
    }

    let last = plan.last().expect("non-empty plan");
    snapshots.push(Snapshot {
        stage: last.stage,
        level: last.level,
        model: model.clone(),
        resume: ResumeMeta {
            plan_index: plan.len() - 1,
            stage_epoch,
            rng_word_pos: rng.get_word_pos(),
            cum_macs,
        },
    });

    // A plan that ends in the full-rank stage (unusual but legal for a
    // degenerate single-stage run) still hands off through one final
    // decomposition so the result is always a low-rank model.
    let final_low = match model {
        ModelKind::Low(m) => m,
        ModelKind::Full(fm) => {
            let cfg = AlsConfig {
                rank: settings.rank,
                max_iters: settings.cp_max_iters,
                fit_tol: settings.cp_fit_tol,
                seed: settings.optim.seed ^ 0xa15,
            };
            let (factors, fit) = cp_als(&fm.w, &cfg)?;
            cp_fit = Some(fit);
            full_rank_final = Some(fm.clone());
            LowRankModel::new(factors.absorb_lambdas(), fm.bias.clone(), settings.activation)?
        }
    };

    Ok(RunResult {
        model: final_low,
        full_rank: full_rank_final,
        trace,
        transitions,
        snapshots,
        cp_fit,
        epochs_per_entry,
    })
}
