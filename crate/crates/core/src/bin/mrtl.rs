//! Command-line surface for multiresolution tensor learning runs:
//! dataset generation, training, paired-run comparison, decomposition,
//! factor export and diagnostics.

use clap::{Args, Parser, Subcommand};
use mrtl::config::{DataSource, RunConfig};
use mrtl::cp::{cp_als, AlsConfig};
use mrtl::data::{generate, load_csv_dataset, Dataset, TaskKind};
use mrtl::diagnostics::{
    contraction_estimate, f1_score, morans_i, speedup_report, theoretical_speedup_factor,
    Neighborhood,
};
use mrtl::error::Error;
use mrtl::io::{
    column_to_pixels, read_checkpoint, read_trace_csv, write_checkpoint, write_matrix_csv,
    write_pgm, write_tensor_file, write_trace_csv, EpochPoint, RunSummary,
};
use mrtl::model::loss_value;
use mrtl::train::{run_fixed, run_mrtl, ModelKind, RunResult, TrainSettings};
use mrtl::Result;
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mrtl", version, about = "Coarse-to-fine tensor learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic dataset tensors, labels, truth factors and manifest.
    Generate(ConfigArgs),
    /// Train with the multiresolution schedule (or the fixed baseline).
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Train only at each stage's final resolution.
        #[arg(long)]
        fixed: bool,
        /// Continue from a transition checkpoint of the same config; the
        /// remaining trace reproduces the original run's exactly.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare two run summaries at a target validation loss.
    Compare {
        /// Summary of the multiresolution run.
        mrtl_summary: PathBuf,
        /// Summary of the fixed-resolution run.
        fixed_summary: PathBuf,
        /// Defaults to the fixed run's final validation loss + 2%.
        #[arg(long)]
        target_loss: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// CP-decompose a full-rank checkpoint into a low-rank one.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        rank: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export factor matrices as CSV plus PGM heatmaps per spatial column.
    ExportFactors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpretability / convergence diagnostics from artifacts.
    Diagnose {
        /// Low-rank checkpoint: Moran's I per spatial factor column.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trace CSV: contraction estimate and theoretical speedup factor.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Terminal estimation error in the speedup factor print.
        #[arg(long, default_value_t = 1e-2)]
        epsilon: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => cmd_generate(common),
        Command::Train { common, fixed, resume } => cmd_train(common, fixed, resume.as_deref()),
        Command::Compare { mrtl_summary, fixed_summary, target_loss, out } => {
            cmd_compare(&mrtl_summary, &fixed_summary, target_loss, &out)
        }
        Command::Decompose { checkpoint, rank, out, seed } => {
            cmd_decompose(&checkpoint, rank, &out, seed.unwrap_or(0))
        }
        Command::ExportFactors { checkpoint, out } => cmd_export_factors(&checkpoint, &out),
        Command::Diagnose { checkpoint, trace, epsilon, out } => {
            cmd_diagnose(checkpoint.as_deref(), trace.as_deref(), epsilon, &out)
        }
    }
}

fn load_config(common: &ConfigArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic { .. } => {
            let spec = cfg.synthetic_spec()?.expect("synthetic source");
            Ok(generate(&spec)?.0)
        }
        DataSource::Csv { path } => {
            load_csv_dataset(path, &cfg.ladder.build()?, cfg.task, cfg.seed)
        }
        DataSource::Mrtn { inputs, labels } => {
            load_mrtn_dataset(inputs, labels, &cfg.ladder.build()?, cfg.task, cfg.seed)
        }
    }
}

fn cmd_generate(common: ConfigArgs) -> Result<()> {
    let (cfg, out) = load_config(&common)?;
    let spec = cfg
        .synthetic_spec()?
        .ok_or_else(|| Error::Config("generate needs a synthetic data source".into()))?;
    let (dataset, truth) = generate(&spec)?;

    let mut files = Vec::new();
    for (li, x) in dataset.inputs.iter().enumerate() {
        let name = format!("x_level{li}.mrtn");
        write_tensor_file(&out.join(&name), x)?;
        files.push(name);
    }
    let mut labels = String::from("id");
    for i in 0..dataset.n_outputs {
        labels.push_str(&format!(",y{i}"));
    }
    labels.push('\n');
    for s in 0..dataset.n_samples() {
        labels.push_str(&s.to_string());
        for i in 0..dataset.n_outputs {
            labels.push_str(&format!(",{}", dataset.labels[s * dataset.n_outputs + i]));
        }
        labels.push('\n');
    }
    std::fs::write(out.join("labels.csv"), labels)?;
    files.push("labels.csv".into());

    for (li, factors) in truth.iter().enumerate() {
        for (fi, m) in factors.factors.iter().enumerate() {
            let name = match fi {
                0 => format!("truth_level{li}_outputs.csv"),
                1 => format!("truth_level{li}_features.csv"),
                _ => format!("truth_level{li}_spatial{}.csv", fi - 2),
            };
            write_matrix_csv(&out.join(&name), m)?;
            files.push(name);
        }
    }

    let manifest = json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "task": cfg.task,
        "samples": dataset.n_samples(),
        "outputs": dataset.n_outputs,
        "levels": cfg.ladder.levels,
        "files": files,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    println!(
        "generated {} samples at {} resolutions into {}",
        dataset.n_samples(),
        dataset.inputs.len(),
        out.display()
    );
    Ok(())
}

fn summarize(
    cfg: &RunConfig,
    dataset: &Dataset,
    settings: &TrainSettings,
    result: &RunResult,
    mode: &str,
) -> Result<RunSummary> {
    let final_level = result.snapshots.last().expect("snapshot exists").level;
    let model = ModelKind::Low(result.model.clone());
    let eval = |indices: &[usize]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let batch = dataset.make_batch(final_level, indices)?;
        let (preds, _) = model.forward(&batch)?;
        let value = loss_value(&settings.loss, &preds, &batch)?;
        Ok((value, preds, batch.y.clone()))
    };
    let (val_loss, val_preds, val_y) = eval(&dataset.split.val)?;
    let (test_loss, test_preds, test_y) = eval(&dataset.split.test)?;
    let classification = dataset.task == TaskKind::Classification;

    let trace = &result.trace;
    // Reuse the report machinery for the per-resolution cost breakdown.
    let cost = speedup_report(trace, trace, f64::NEG_INFINITY);
    let mut wall_cum = 0.0;
    let epochs = trace
        .records
        .iter()
        .map(|r| {
            wall_cum += r.wall_secs;
            EpochPoint {
                stage: r.stage,
                resolution: r.resolution,
                epoch: r.epoch,
                val_loss: r.val_loss,
                cum_macs: r.cum_macs,
                wall_secs: r.wall_secs,
            }
        })
        .collect();
    Ok(RunSummary {
        mode: mode.into(),
        task: cfg.task,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        data_seed: dataset.seed,
        final_train_loss: trace.records.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        final_val_loss: val_loss,
        test_loss,
        f1_val: if classification { f1_score(&val_preds, &val_y) } else { None },
        f1_test: if classification { f1_score(&test_preds, &test_y) } else { None },
        cp_fit: result.cp_fit,
        total_macs: trace.total_macs(),
        total_wall_secs: trace.total_wall_secs(),
        per_resolution: cost.mrtl.breakdown,
        epochs,
        transitions: result.transitions.clone(),
        events: trace.events.clone(),
    })
}

fn cmd_train(common: ConfigArgs, fixed: bool, resume: Option<&Path>) -> Result<()> {
    let (cfg, out) = load_config(&common)?;
    let dataset = build_dataset(&cfg)?;
    let beta = match cfg.task {
        TaskKind::Classification => dataset.class_balance_beta()?,
        TaskKind::Regression => 1.0,
    };
    let settings = cfg.train_settings(beta);
    let hash = cfg.hash();
    let result = match resume {
        None => {
            if fixed {
                run_fixed(&dataset, &settings)?
            } else {
                run_mrtl(&dataset, &settings)?
            }
        }
        Some(ck_path) => {
            let (header, model) = read_checkpoint(ck_path)?;
            if header.config_hash != hash {
                return Err(Error::Config(
                    "checkpoint was written under a different config".into(),
                ));
            }
            let meta = header.resume.ok_or_else(|| {
                Error::Config("checkpoint carries no training state to resume from".into())
            })?;
            let plan = if fixed {
                fixed_plan(dataset.ladder.n_levels(), dataset.ladder.r0)
            } else {
                mrtl_plan(dataset.ladder.n_levels(), dataset.ladder.r0)
            };
            let entry = plan.get(meta.plan_index).copied().ok_or_else(|| {
                Error::Config("checkpoint position lies outside this plan".into())
            })?;
            if entry.level != header.level || entry.stage != header.stage {
                return Err(Error::Config(
                    "checkpoint stage/level does not match the plan; wrong --fixed?".into(),
                ));
            }
            run_plan_from(&dataset, &plan, &settings, Some((model, meta)))?
        }
    };

    write_trace_csv(&out.join("trace.csv"), &result.trace)?;
    for (i, snap) in result.snapshots.iter().enumerate() {
        let name = format!("checkpoint_{i}_{}_level{}.ck", snap.stage, snap.level);
        let dims = &dataset.ladder.levels[snap.level].dims;
        write_checkpoint(
            &out.join(name),
            &snap.model,
            snap.level,
            dims,
            cfg.seed,
            &hash,
            Some(snap.resume),
        )?;
    }
    let mode = if fixed { "fixed" } else { "mrtl" };
    let summary = summarize(&cfg, &dataset, &settings, &result, mode)?;
    summary.write(&out.join("summary.json"))?;

    println!(
        "{mode} run: {} epochs, final val loss {:.6}, test loss {:.6}, {} MMACs{}",
        result.trace.records.len(),
        summary.final_val_loss,
        summary.test_loss,
        summary.total_macs / 1_000_000,
        summary.f1_test.map(|f| format!(", test F1 {f:.4}")).unwrap_or_default()
    );
    for e in &result.trace.events {
        println!("warning: {e}");
    }
    Ok(())
}

fn cmd_compare(
    mrtl_path: &Path,
    fixed_path: &Path,
    target_loss: Option<f64>,
    out: &Path,
) -> Result<()> {
    let mrtl = RunSummary::read(mrtl_path)?;
    let fixed = RunSummary::read(fixed_path)?;
    if mrtl.data_seed != fixed.data_seed {
        return Err(Error::Config(format!(
            "summaries come from different data seeds ({} vs {})",
            mrtl.data_seed, fixed.data_seed
        )));
    }
    let target = target_loss.unwrap_or(fixed.final_val_loss * 1.02);
    let report = speedup_report(&mrtl.to_trace(), &fixed.to_trace(), target);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("speedup.json"), serde_json::to_vec_pretty(&report)?)?;

    println!("target validation loss: {target:.6}");
    for (name, cost) in [("mrtl", &report.mrtl), ("fixed", &report.fixed)] {
        match &cost.crossing {
            Some(c) => println!(
                "  {name}: reached at epoch {} with {} MMACs, {:.2}s",
                c.record_index,
                c.macs / 1_000_000,
                c.wall_secs
            ),
            None => println!("  {name}: never reached (best {:.6})", cost.best_val_loss),
        }
    }
    match (report.mac_ratio, report.wall_ratio) {
        (Some(m), Some(w)) => println!("speedup: {m:.2}x MACs, {w:.2}x wall clock"),
        _ => println!("speedup: not comparable (a run never crossed the target)"),
    }
    Ok(())
}

fn cmd_decompose(checkpoint: &Path, rank: usize, out: &Path, seed: u64) -> Result<()> {
    let (header, model) = read_checkpoint(checkpoint)?;
    let ModelKind::Full(fm) = model else {
        return Err(Error::Config("checkpoint is already low rank".into()));
    };
    let cfg = AlsConfig { rank, seed, ..Default::default() };
    let (factors, fit) = cp_als(&fm.w, &cfg)?;
    let low =
        mrtl::model::LowRankModel::new(factors.absorb_lambdas(), fm.bias.clone(), fm.activation)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("decomposed.ck");
    write_checkpoint(
        &path,
        &ModelKind::Low(low),
        header.level,
        &header.grid_dims,
        header.seed,
        &header.config_hash,
        None,
    )?;
    println!("rank-{rank} decomposition fit {fit:.6} -> {}", path.display());
    Ok(())
}

fn cmd_export_factors(checkpoint: &Path, out: &Path) -> Result<()> {
    let (header, model) = read_checkpoint(checkpoint)?;
    let ModelKind::Low(lm) = model else {
        return Err(Error::Config(
            "full-rank checkpoint has no factors; run `mrtl decompose` on it first".into(),
        ));
    };
    std::fs::create_dir_all(out)?;
    for (fi, name) in header.tensors.iter().enumerate() {
        write_matrix_csv(&out.join(format!("{name}.csv")), &lm.factors[fi])?;
    }

    let grid = mrtl::grid::GridSpec::unit(header.grid_dims.clone())?;
    let (width, height) = match header.grid_dims.len() {
        1 => (header.grid_dims[0], 1),
        2 => (header.grid_dims[1], header.grid_dims[0]),
        _ => return Err(Error::Config("heatmap export supports 1D and 2D grids only".into())),
    };
    let mut sidecar = Vec::new();
    for (si, c) in lm.spatial_factors().iter().enumerate() {
        for k in 0..c.cols() {
            let column = c.column(k);
            let pixels = column_to_pixels(&column);
            let name = format!("factor_spatial_{si}_k{k}.pgm");
            write_pgm(&out.join(&name), width, height, &pixels)?;
            let entry = match morans_i(&column, &grid, Neighborhood::Rook) {
                Ok(i) => json!({"factor": si, "column": k, "file": name, "morans_i": i}),
                Err(Error::ZeroVariance) => {
                    json!({"factor": si, "column": k, "file": name, "error": "zero variance"})
                }
                Err(e) => return Err(e),
            };
            sidecar.push(entry);
        }
    }
    std::fs::write(
        out.join("morans_i.json"),
        serde_json::to_vec_pretty(&serde_json::Value::Array(sidecar))?,
    )?;
    println!("exported {} factor matrices to {}", lm.factors.len(), out.display());
    Ok(())
}

fn cmd_diagnose(
    checkpoint: Option<&Path>,
    trace: Option<&Path>,
    epsilon: f64,
    out: &Path,
) -> Result<()> {
    if checkpoint.is_none() && trace.is_none() {
        return Err(Error::Config("diagnose needs --checkpoint and/or --trace".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut report = serde_json::Map::new();

    if let Some(ck) = checkpoint {
        let (header, model) = read_checkpoint(ck)?;
        let ModelKind::Low(lm) = model else {
            return Err(Error::Config("diagnose --checkpoint expects a low-rank model".into()));
        };
        let grid = mrtl::grid::GridSpec::unit(header.grid_dims.clone())?;
        let mut per_column = Vec::new();
        let mut values = Vec::new();
        for (si, c) in lm.spatial_factors().iter().enumerate() {
            for k in 0..c.cols() {
                let column = c.column(k);
                match morans_i(&column, &grid, Neighborhood::Rook) {
                    Ok(i) => {
                        values.push(i);
                        per_column.push(json!({"factor": si, "column": k, "morans_i": i}));
                    }
                    Err(Error::ZeroVariance) => per_column
                        .push(json!({"factor": si, "column": k, "error": "zero variance"})),
                    Err(e) => return Err(e),
                }
            }
        }
        let mean = if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        println!("mean Moran's I over {} spatial columns: {mean:.4}", values.len());
        report.insert("morans_i_mean".into(), json!(mean));
        report.insert("morans_i_columns".into(), json!(per_column));
    }

    if let Some(tp) = trace {
        let t = read_trace_csv(tp)?;
        let gamma = contraction_estimate(&t)?;
        let factor = theoretical_speedup_factor(gamma, epsilon);
        println!(
            "contraction estimate gamma = {gamma:.4}; theoretical speedup factor \
             log(1/((1-gamma) eps)) = {factor:.3} at eps = {epsilon:.1e}"
        );
        report.insert("gamma".into(), json!(gamma));
        report.insert("epsilon".into(), json!(epsilon));
        report.insert("theoretical_speedup_factor".into(), json!(factor));
    }

    std::fs::write(
        out.join("diagnose.json"),
        serde_json::to_vec_pretty(&serde_json::Value::Object(report))?,
    )?;
    Ok(())
}
