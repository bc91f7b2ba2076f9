//! Advisor-mode replay: walks a recorded batch, proposes an MPC input at
//! every step inside the corridor around the operator's actual input,
//! predicts its one-step outcome, and keeps learning from the real
//! transitions only.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::{adapt_forgetting, ForgettingConfig, LiftedModel, ResetConfig, Snapshot, StepReport};
use crate::ingest::BatchLog;
use crate::lifting::Dictionary;
use crate::metrics::{cpk, CpkValue, SpecLimits};
use crate::mpc::{control_step, CorridorSource, MpcConfig};

/// Replay tunables on top of the MPC configuration.
#[derive(Debug, Clone)]
pub struct AdvisorSettings {
    /// Per-channel historical input range (corridor floor scale).
    pub u_range: DVector<f64>,
    /// State setpoints the advice steers toward.
    pub setpoints: DVector<f64>,
    /// Specification limits per state channel, for the summary Cpk pairs.
    pub limits: Vec<SpecLimits>,
    /// When false the replay only updates the model (used to verify the
    /// advice never contaminates learning).
    pub generate_advice: bool,
    /// Sliding window length for the adaptive forgetting factor.
    pub adapt_window: usize,
    pub forgetting: ForgettingConfig,
    pub reset: ResetConfig,
}

/// One replayed step. Vectors are plain arrays so the step stream
/// serializes directly to JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvisorStep {
    pub t_index: usize,
    pub x_actual: Vec<f64>,
    pub u_actual: Vec<f64>,
    pub u_mpc: Option<Vec<f64>>,
    pub x_pred_next: Option<Vec<f64>>,
    pub conf: f64,
    pub corridor_lower: Vec<f64>,
    pub corridor_upper: Vec<f64>,
    pub qp_status: String,
    pub fallback: bool,
    pub error: Option<String>,
}

/// Per-channel aggregate over a replayed batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelOutcome {
    pub channel: usize,
    pub setpoint: f64,
    pub cpk_actual: Option<CpkValue>,
    pub cpk_predicted: Option<CpkValue>,
    /// Mean absolute deviation from the setpoint.
    pub mad_actual: f64,
    pub mad_predicted: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvisorSummary {
    pub batch_id: u32,
    pub steps_total: usize,
    pub steps_advised: usize,
    pub steps_failed: usize,
    pub channels: Vec<ChannelOutcome>,
    pub final_confidence: f64,
}

pub struct AdvisorRun {
    pub steps: Vec<AdvisorStep>,
    pub summary: AdvisorSummary,
    pub model: LiftedModel,
}

fn mad(series: &[f64], setpoint: f64) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    series.iter().map(|v| (v - setpoint).abs()).sum::<f64>() / series.len() as f64
}

/// Replays one batch. Per step: read the actual state and input, place the
/// corridor around the actual input, solve for the advised move, predict
/// its one-step outcome, then update the model with the ACTUAL transition.
/// Step-level errors are recorded and the replay continues.
pub fn run_advisor(
    batch: &BatchLog,
    model0: &LiftedModel,
    dict: &Dictionary,
    mpc_cfg: &MpcConfig,
    settings: &AdvisorSettings,
) -> Result<AdvisorRun> {
    let n_s = mpc_cfg.n_states();
    let n_c = mpc_cfg.n_inputs();
    if settings.u_range.len() != n_c || settings.setpoints.len() != n_s {
        return Err(Error::DimensionMismatch {
            context: "advisor settings",
            expected: n_c,
            got: settings.u_range.len(),
        });
    }
    if batch.len() < 2 {
        return Err(Error::EmptyInput("advisor replay needs at least two rows"));
    }

    let mut model = model0.clone();
    let mut steps = Vec::new();
    let mut reports: Vec<StepReport> = Vec::new();
    let mut u_prev: Option<DVector<f64>> = None;
    let mut warm: Option<DVector<f64>> = None;
    let mut advised = 0usize;
    let mut failed = 0usize;
    // Per-channel paired trajectories for the summary.
    let mut actual_series = vec![Vec::new(); n_s];
    let mut pred_series = vec![Vec::new(); n_s];

    for t in 0..batch.len() - 1 {
        if !batch.valid[t] || !batch.valid[t + 1] {
            continue;
        }
        let x_actual = batch.state_row(t);
        let u_actual = batch.input_row(t);
        let x_next_actual = batch.state_row(t + 1);
        let u_prev_t = u_prev.clone().unwrap_or_else(|| u_actual.clone());

        let mut step = AdvisorStep {
            t_index: t,
            x_actual: x_actual.iter().copied().collect(),
            u_actual: u_actual.iter().copied().collect(),
            u_mpc: None,
            x_pred_next: None,
            conf: model.confidence(),
            corridor_lower: Vec::new(),
            corridor_upper: Vec::new(),
            qp_status: String::new(),
            fallback: false,
            error: None,
        };

        if settings.generate_advice {
            let source = CorridorSource::Advisor {
                u_actual: &u_actual,
                u_range: &settings.u_range,
            };
            match control_step(
                &model,
                &source,
                &x_actual,
                &settings.setpoints,
                &u_prev_t,
                mpc_cfg,
                dict,
                warm.as_ref(),
            ) {
                Ok(out) => {
                    let pred = model.predict_one(&x_actual, &out.u_apply, dict);
                    match pred {
                        Ok(xp) if xp.iter().all(|v| v.is_finite()) => {
                            advised += 1;
                            for j in 0..n_s {
                                actual_series[j].push(x_next_actual[j]);
                                pred_series[j].push(xp[j]);
                            }
                            step.x_pred_next = Some(xp.iter().copied().collect());
                        }
                        Ok(_) => {
                            failed += 1;
                            step.error = Some("non-finite prediction".into());
                        }
                        Err(e) => {
                            failed += 1;
                            step.error = Some(e.to_string());
                        }
                    }
                    step.u_mpc = Some(out.u_apply.iter().copied().collect());
                    step.corridor_lower =
                        out.diagnostics.corridor.lower.iter().copied().collect();
                    step.corridor_upper =
                        out.diagnostics.corridor.upper.iter().copied().collect();
                    step.qp_status = format!("{:?}", out.diagnostics.qp_status);
                    step.fallback = out.diagnostics.fallback;
                    warm = Some(out.diagnostics.u_sequence.clone());
                }
                Err(e) => {
                    failed += 1;
                    step.error = Some(e.to_string());
                    warm = None;
                }
            }
        }

        // Learning always uses the real transition, never the advice.
        let snap = Snapshot::new(x_actual, u_actual.clone(), x_next_actual);
        let rep = model.rls_update(&snap, dict)?;
        reports.push(rep);
        if reports.len() > settings.adapt_window {
            let drop = reports.len() - settings.adapt_window;
            reports.drain(..drop);
        }
        let lambda = adapt_forgetting(&reports, &settings.forgetting);
        model.set_lambda_f(lambda);
        model.maybe_reset_covariance(&settings.reset);

        steps.push(step);
        u_prev = Some(u_actual);
    }

    let channels = (0..n_s)
        .map(|j| ChannelOutcome {
            channel: j,
            setpoint: settings.setpoints[j],
            cpk_actual: settings
                .limits
                .get(j)
                .and_then(|l| cpk(&actual_series[j], l).ok()),
            cpk_predicted: settings
                .limits
                .get(j)
                .and_then(|l| cpk(&pred_series[j], l).ok()),
            mad_actual: mad(&actual_series[j], settings.setpoints[j]),
            mad_predicted: mad(&pred_series[j], settings.setpoints[j]),
        })
        .collect();

    let summary = AdvisorSummary {
        batch_id: batch.batch_id,
        steps_total: steps.len(),
        steps_advised: advised,
        steps_failed: failed,
        channels,
        final_confidence: model.confidence(),
    };
    Ok(AdvisorRun {
        steps,
        summary,
        model,
    })
}

/// Writes the step stream as JSON lines, one record per step.
pub fn save_steps_jsonl(path: &Path, steps: &[AdvisorStep]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in steps {
        let line = serde_json::to_string(s)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_summary(path: &Path, summary: &AdvisorSummary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let doc = serde_json::to_string_pretty(summary)?;
    writeln!(w, "{doc}")?;
    Ok(())
}
