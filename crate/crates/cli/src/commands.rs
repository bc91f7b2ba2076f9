//! Command implementations behind the CLI surface. Each command is a plain
//! function over paths and the run configuration so tests can drive them
//! without spawning processes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use koopman_mpc::advisor::{run_advisor, save_steps_jsonl, save_summary, AdvisorSettings, AdvisorSummary};
use koopman_mpc::closedloop::{excitation_snapshots, history_from_snapshots, run_closed_loop, ClosedLoopConfig};
use koopman_mpc::ident::batch_fit;
use koopman_mpc::ingest::{input_bounds, load_batches, BatchLog};
use koopman_mpc::model_io::{load_model, save_model};
use koopman_mpc::mpc::InputExtension;
use koopman_mpc::{CorridorConfig, Dictionary, Error, MpcConfig, Result, SpecLimits, SyntheticPlant};

use crate::config::RunConfig;

/// Documented process exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::UnsupportedDegree(_) => 1,
        Error::Io(_)
        | Error::Parse { .. }
        | Error::BatchRejected(_)
        | Error::EmptyInput(_)
        | Error::Serde(_)
        | Error::DimensionMismatch { .. }
        | Error::NotEnoughNeighbors { .. } => 2,
        Error::NonFinite { .. }
        | Error::RankDeficient { .. }
        | Error::UnstableHorizon { .. }
        | Error::QpInfeasible => 3,
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == ext).unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Replicates a configured vector onto `n` channels when the lengths
/// disagree (single-knob configs drive plants of any input width).
fn fit_vec(v: &[f64], n: usize, fallback: f64) -> DVector<f64> {
    if v.len() == n {
        DVector::from_row_slice(v)
    } else {
        DVector::from_element(n, v.first().copied().unwrap_or(fallback))
    }
}

fn diag(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(v)
}

fn mpc_config_for(cfg: &RunConfig, n_s: usize, n_c: usize, u_min: DVector<f64>, u_max: DVector<f64>) -> MpcConfig {
    MpcConfig {
        hp: cfg.mpc.hp,
        hc: cfg.mpc.hc,
        q: diag(&fit_vec(&cfg.mpc.q_diag, n_s, 1.0)),
        r: diag(&fit_vec(&cfg.mpc.r_diag, n_c, 0.01)),
        s: diag(&fit_vec(&cfg.mpc.s_diag, n_c, 0.0)),
        u_min,
        u_max,
        input_extension: if cfg.mpc.input_extension == "zero" {
            InputExtension::Zero
        } else {
            InputExtension::HoldLast
        },
        disturbance_channels: cfg.mpc.disturbance_channels.clone(),
    }
}

/// Historical input envelope frozen at fit time, consumed by the advisor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsFile {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub range: Vec<f64>,
}

fn bounds_sidecar(model_path: &Path) -> PathBuf {
    model_path.with_extension("bounds.json")
}

/// Reads raw batch files, aligns and cleans them, and writes cleaned logs
/// plus a rejection report. Fails unless at least one batch survives.
pub fn cmd_ingest(raw_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let schema = cfg.schema.to_schema();
    let paths = sorted_files(raw_dir, "csv")?;
    let (batches, report) = load_batches(&paths, &schema);
    std::fs::create_dir_all(out_dir)?;
    for b in &batches {
        b.save(&out_dir.join(format!("batch_{:03}.csv", b.batch_id)), &schema)?;
    }
    let mut w = BufWriter::new(File::create(out_dir.join("report.json"))?);
    writeln!(w, "{}", serde_json::to_string_pretty(&report)?)?;
    if batches.is_empty() {
        return Err(Error::EmptyInput("no batches survived ingestion"));
    }
    println!(
        "ingested {} batches, rejected {}",
        batches.len(),
        report.rejected.len()
    );
    Ok(())
}

/// Offline fit over a directory of cleaned batches. Writes the model file
/// and a bounds sidecar holding the historical input envelope.
pub fn cmd_fit(cleaned_dir: &Path, model_out: &Path, cfg: &RunConfig) -> Result<()> {
    let schema = cfg.schema.to_schema();
    let paths = sorted_files(cleaned_dir, "csv")?;
    let mut batches = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        batches.push(BatchLog::load(p, &schema, (i + 1) as u32)?);
    }
    if batches.is_empty() {
        return Err(Error::EmptyInput("no cleaned batches to fit"));
    }
    let dict = Dictionary::new(cfg.dictionary.state_dim, cfg.dictionary.degree)?;
    let mut snapshots = Vec::new();
    for b in &batches {
        snapshots.extend(b.snapshots());
    }
    let mut model = batch_fit(&snapshots, &dict, cfg.identification.lambda_reg)?;
    model.set_lambda_f(cfg.identification.lambda_f);

    let (u_min, u_max, range) = input_bounds(&batches, cfg.bounds.quantile, cfg.bounds.margin)?;
    let bounds = BoundsFile {
        u_min: u_min.iter().copied().collect(),
        u_max: u_max.iter().copied().collect(),
        range: range.iter().copied().collect(),
    };
    let mut w = BufWriter::new(File::create(bounds_sidecar(model_out))?);
    writeln!(w, "{}", serde_json::to_string_pretty(&bounds)?)?;

    save_model(model_out, &model, &dict, None)?;
    println!(
        "fitted model on {} transitions from {} batches",
        snapshots.len(),
        batches.len()
    );
    Ok(())
}

/// Replays one cleaned batch in advisor mode: step stream plus summary.
pub fn cmd_advise(
    batch_file: &Path,
    model_file: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let schema = cfg.schema.to_schema();
    let batch_id = batch_file
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.chars().filter(|c| c.is_ascii_digit()).collect::<String>().parse().ok())
        .unwrap_or(1);
    let batch = BatchLog::load(batch_file, &schema, batch_id)?;
    let (model, dict, _norm) = load_model(model_file)?;

    let sidecar = bounds_sidecar(model_file);
    let (u_min, u_max, range) = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        let b: BoundsFile = serde_json::from_str(&text)?;
        (
            DVector::from_row_slice(&b.u_min),
            DVector::from_row_slice(&b.u_max),
            DVector::from_row_slice(&b.range),
        )
    } else {
        input_bounds(std::slice::from_ref(&batch), cfg.bounds.quantile, cfg.bounds.margin)?
    };

    let n_s = dict.state_dim();
    let n_c = model.n_inputs();
    let mpc_cfg = mpc_config_for(cfg, n_s, n_c, u_min, u_max);
    let limits = cfg
        .process
        .lsl
        .iter()
        .zip(cfg.process.usl.iter())
        .map(|(&l, &u)| SpecLimits::new(l, u))
        .collect::<Result<Vec<_>>>()?;
    let settings = AdvisorSettings {
        u_range: range,
        setpoints: DVector::from_row_slice(&cfg.process.setpoints),
        limits,
        generate_advice: true,
        adapt_window: cfg.identification.adapt_window,
        forgetting: cfg.identification.forgetting(),
        reset: cfg.identification.reset(),
    };
    let run = run_advisor(&batch, &model, &dict, &mpc_cfg, &settings)?;

    std::fs::create_dir_all(out_dir)?;
    save_steps_jsonl(&out_dir.join(format!("steps_{batch_id:03}.jsonl")), &run.steps)?;
    save_summary(&out_dir.join(format!("summary_{batch_id:03}.json")), &run.summary)?;
    println!(
        "advised batch {}: {} steps, {} failed",
        batch_id, run.summary.steps_total, run.summary.steps_failed
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrajectoryRecord {
    step: usize,
    x: Vec<f64>,
    u: Vec<f64>,
    confidence: f64,
    cost: f64,
    fallback: bool,
}

#[derive(Debug, Serialize)]
struct ClosedLoopMetrics {
    steps: usize,
    adaptation: bool,
    mse_total: f64,
    mse_first_half: f64,
    mse_second_half: f64,
    fallback_steps: usize,
}

/// Bootstraps a model and history database from a random-excitation run,
/// then closes the loop on the named synthetic plant.
pub fn cmd_closedloop(
    plant_name: &str,
    seed: u64,
    out_dir: &Path,
    cfg: &RunConfig,
    adaptation_override: Option<bool>,
) -> Result<()> {
    let cl = &cfg.closedloop;
    let plant = SyntheticPlant::by_name(plant_name, cl.plant_noise_std, cl.drift_at)?;
    let n_s = plant.state_dim();
    let n_c = plant.input_dim();
    let dict = Dictionary::new(n_s, cfg.dictionary.degree)?;

    let x0 = fit_vec(&cl.x0, n_s, 0.0);
    let u_min = fit_vec(&cl.u_min, n_c, -0.9);
    let u_max = fit_vec(&cl.u_max, n_c, 0.9);
    let snaps = excitation_snapshots(&plant, &x0, &u_min, &u_max, cl.excitation_steps, seed);
    let mut model = batch_fit(&snaps, &dict, cfg.identification.lambda_reg)?;
    model.set_lambda_f(cfg.identification.lambda_f);
    let db = history_from_snapshots(&snaps, &dict)?;

    let sigma_d2 = if cfg.corridor.sigma_d2 > 0.0 {
        cfg.corridor.sigma_d2
    } else {
        db.suggest_sigma_d2(cfg.corridor.k)
            .ok_or(Error::EmptyInput("history too small for kernel width"))?
    };
    let corridor_cfg = CorridorConfig {
        k: cfg.corridor.k,
        sigma_d2,
        alpha_base: cl.alpha_base,
        beta_adapt: cl.beta_adapt,
        delta_abs: vec![cl.delta_abs; n_c],
    };
    let mpc_cfg = mpc_config_for(cfg, n_s, n_c, u_min, u_max);
    let run_cfg = ClosedLoopConfig {
        steps: cl.steps,
        adaptation: adaptation_override.unwrap_or(cl.adaptation),
        adapt_window: cfg.identification.adapt_window,
        forgetting: cfg.identification.forgetting(),
        reset: cfg.identification.reset(),
    };
    let setpoints = fit_vec(&cl.setpoints, n_s, 0.0);
    let run = run_closed_loop(
        &plant,
        &model,
        &dict,
        &db,
        &corridor_cfg,
        &mpc_cfg,
        &setpoints,
        &x0,
        &run_cfg,
        seed.wrapping_add(1),
    )?;

    std::fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join("trajectory.jsonl"))?);
    for (k, d) in run.diagnostics.iter().enumerate() {
        let rec = TrajectoryRecord {
            step: k,
            x: run.states[k + 1].iter().copied().collect(),
            u: run.inputs[k].iter().copied().collect(),
            confidence: d.confidence,
            cost: d.cost,
            fallback: d.fallback,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    let half = cl.steps / 2;
    let metrics = ClosedLoopMetrics {
        steps: cl.steps,
        adaptation: run_cfg.adaptation,
        mse_total: run.tracking_mse(&setpoints, 1, cl.steps + 1),
        mse_first_half: run.tracking_mse(&setpoints, 1, half + 1),
        mse_second_half: run.tracking_mse(&setpoints, half + 1, cl.steps + 1),
        fallback_steps: run.diagnostics.iter().filter(|d| d.fallback).count(),
    };
    let mut w = BufWriter::new(File::create(out_dir.join("metrics.json"))?);
    writeln!(w, "{}", serde_json::to_string_pretty(&metrics)?)?;
    println!(
        "closed loop on '{plant_name}': {} steps, post-half MSE {:.6}",
        cl.steps, metrics.mse_second_half
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow {
    batch_id: u32,
    channel: usize,
    cpk_hist: f64,
    cpk_mpc: f64,
    delta: f64,
}

#[derive(Debug, Serialize)]
struct ChannelDistribution {
    channel: usize,
    hist_median: f64,
    hist_q1: f64,
    hist_q3: f64,
    mpc_median: f64,
    mpc_q1: f64,
    mpc_q3: f64,
    improved: usize,
    total: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    rows: Vec<ReportRow>,
    distributions: Vec<ChannelDistribution>,
}

fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |p: f64| {
        if sorted.is_empty() {
            return f64::NAN;
        }
        let idx = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (idx.floor() as usize, idx.ceil() as usize);
        sorted[lo] + (idx - lo as f64) * (sorted[hi] - sorted[lo])
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Aggregates advisor summaries into the cross-batch Cpk comparison,
/// emitted as delimited text and JSON.
pub fn cmd_report(summaries_dir: &Path, out_dir: &Path, _cfg: &RunConfig) -> Result<()> {
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut per_channel: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
    let files = sorted_files(summaries_dir, "json")?;
    for path in &files {
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if !name.starts_with("summary") {
            continue;
        }
        let text = std::fs::read_to_string(path)?;
        let summary: AdvisorSummary = serde_json::from_str(&text)?;
        for ch in &summary.channels {
            if let (Some(h), Some(p)) = (ch.cpk_actual, ch.cpk_predicted) {
                rows.push(ReportRow {
                    batch_id: summary.batch_id,
                    channel: ch.channel,
                    cpk_hist: h.value,
                    cpk_mpc: p.value,
                    delta: p.value - h.value,
                });
                per_channel
                    .entry(ch.channel)
                    .or_default()
                    .push((h.value, p.value));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no advisor summaries found"));
    }
    let mut distributions = Vec::new();
    for (channel, vals) in &per_channel {
        let mut hist: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let mut mpc: Vec<f64> = vals.iter().map(|v| v.1).collect();
        hist.sort_by(|a, b| a.total_cmp(b));
        mpc.sort_by(|a, b| a.total_cmp(b));
        let (h1, h2, h3) = quartiles(&hist);
        let (m1, m2, m3) = quartiles(&mpc);
        distributions.push(ChannelDistribution {
            channel: *channel,
            hist_median: h2,
            hist_q1: h1,
            hist_q3: h3,
            mpc_median: m2,
            mpc_q1: m1,
            mpc_q3: m3,
            improved: vals.iter().filter(|(h, p)| p > h).count(),
            total: vals.len(),
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join("report.csv"))?);
    writeln!(w, "batch_id,channel,cpk_hist,cpk_mpc,delta")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{:?},{:?},{:?}",
            r.batch_id, r.channel, r.cpk_hist, r.cpk_mpc, r.delta
        )?;
    }
    let report = Report {
        rows,
        distributions,
    };
    let mut w = BufWriter::new(File::create(out_dir.join("report.json"))?);
    writeln!(w, "{}", serde_json::to_string_pretty(&report)?)?;
    println!("report over {} summaries", files.len());
    Ok(())
}
