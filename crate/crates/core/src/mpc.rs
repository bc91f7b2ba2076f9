//! Condensed MPC: prediction matrices over the horizon, assembly of the
//! dense QP (cost weights, box constraints, first-move corridor), and the
//! receding-horizon control step with its safety fallback.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{advisor_corridor, Corridor, CorridorConfig, HistoryDatabase};
use crate::ident::LiftedModel;
use crate::lifting::Dictionary;
use crate::qp::{self, QpStatus};

/// How inputs beyond the control horizon are extended up to the prediction
/// horizon: hold the final move (move blocking) or assume zero input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputExtension {
    HoldLast,
    Zero,
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub hp: usize,
    pub hc: usize,
    /// State weight, n_s square.
    pub q: DMatrix<f64>,
    /// Input weight, n_c square.
    pub r: DMatrix<f64>,
    /// Input-rate weight, n_c square.
    pub s: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub input_extension: InputExtension,
    /// Input channels that are measured disturbances: held at their last
    /// measured value over the horizon and excluded from the decision.
    pub disturbance_channels: Vec<usize>,
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hc == 0 || self.hc > self.hp {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= Hc <= Hp, got Hc={} Hp={}",
                self.hc, self.hp
            )));
        }
        let n_c = self.r.nrows();
        if self.u_min.len() != n_c || self.u_max.len() != n_c || self.s.nrows() != n_c {
            return Err(Error::InvalidConfig("input dimension mismatch".into()));
        }
        for j in 0..n_c {
            if !(self.u_min[j] < self.u_max[j]) {
                return Err(Error::InvalidConfig(format!(
                    "u_min must be < u_max on channel {j}"
                )));
            }
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("S", &self.s)] {
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidConfig(format!("{name} must be symmetric")));
            }
        }
        if self.disturbance_channels.iter().any(|&c| c >= n_c) {
            return Err(Error::InvalidConfig(
                "disturbance channel index out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.r.nrows()
    }
}

/// Condensed prediction: stacked predicted states as a linear function of
/// the current lifted state and the move sequence.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    /// (n_s * Hp) x N_obs.
    pub sx: DMatrix<f64>,
    /// (n_s * Hp) x (n_c * Hc).
    pub su: DMatrix<f64>,
}

/// One control step's dense QP.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h_vec: DVector<f64>,
    /// Flat decision indices pinned to fixed values (degenerate corridor
    /// channels on the first move, disturbance channels on every move).
    pub pinned: Vec<(usize, f64)>,
    /// Channels where the corridor had to be clipped or collapsed against
    /// the physical box.
    pub repaired_channels: Vec<usize>,
}

/// Builds `S_x` and `S_u` from the identified model. Row block `j` of `S_x`
/// is `C A^{j+1}`; `S_u` carries the forced response with the configured
/// input extension beyond the control horizon.
pub fn build_prediction(
    model: &LiftedModel,
    cfg: &MpcConfig,
    n_s: usize,
) -> Result<PredictionMatrices> {
    cfg.validate()?;
    let n_obs = model.n_obs();
    let n_c = model.n_inputs();
    if n_s > n_obs {
        return Err(Error::DimensionMismatch {
            context: "prediction state dimension",
            expected: n_obs,
            got: n_s,
        });
    }
    let a = model.a_matrix();
    let b = model.b_matrix();
    let hp = cfg.hp;
    let hc = cfg.hc;

    // a_pows[j] = A^j, j = 0..=Hp.
    let mut a_pows = Vec::with_capacity(hp + 1);
    a_pows.push(DMatrix::identity(n_obs, n_obs));
    for j in 1..=hp {
        let next = &a_pows[j - 1] * &a;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnstableHorizon { power: j });
        }
        a_pows.push(next);
    }

    let mut sx = DMatrix::zeros(n_s * hp, n_obs);
    let mut su = DMatrix::zeros(n_s * hp, n_c * hc);
    for step in 1..=hp {
        let rb = step - 1;
        // C A^step: selection = top n_s rows.
        sx.view_mut((rb * n_s, 0), (n_s, n_obs))
            .copy_from(&a_pows[step].rows(0, n_s));
        for t in 0..step {
            // Input at relative time t contributes A^{step-1-t} B.
            let move_idx = match cfg.input_extension {
                InputExtension::HoldLast => t.min(hc - 1),
                InputExtension::Zero => {
                    if t < hc {
                        t
                    } else {
                        continue;
                    }
                }
            };
            let block = a_pows[step - 1 - t].rows(0, n_s) * &b;
            let mut dst = su.view_mut((rb * n_s, move_idx * n_c), (n_s, n_c));
            dst += block;
        }
    }
    Ok(PredictionMatrices { sx, su })
}

fn block_diag(m: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n * count, n * count);
    for k in 0..count {
        out.view_mut((k * n, k * n), (n, n)).copy_from(m);
    }
    out
}

/// First-difference operator over the move sequence: `Delta = L U - M u_prev`.
fn difference_operator(n_c: usize, hc: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n_c * hc, n_c * hc);
    for k in 0..hc {
        l.view_mut((k * n_c, k * n_c), (n_c, n_c))
            .copy_from(&DMatrix::identity(n_c, n_c));
        if k > 0 {
            l.view_mut((k * n_c, (k - 1) * n_c), (n_c, n_c))
                .copy_from(&(-DMatrix::identity(n_c, n_c)));
        }
    }
    l
}

/// Expands a reference given either as one setpoint (held constant) or as a
/// full stacked trajectory.
pub fn expand_reference(x_ref: &DVector<f64>, n_s: usize, hp: usize) -> Result<DVector<f64>> {
    if x_ref.len() == n_s * hp {
        Ok(x_ref.clone())
    } else if x_ref.len() == n_s {
        let mut out = DVector::zeros(n_s * hp);
        for j in 0..hp {
            out.rows_mut(j * n_s, n_s).copy_from(x_ref);
        }
        Ok(out)
    } else {
        Err(Error::DimensionMismatch {
            context: "reference trajectory",
            expected: n_s * hp,
            got: x_ref.len(),
        })
    }
}

/// Assembles the QP for one control step: Hessian and gradient from the
/// condensed cost, box rows on every move, corridor rows on the first move
/// (intersected with the box, collapsing to the nearest face when empty).
pub fn build_qp(
    pm: &PredictionMatrices,
    psi_now: &DVector<f64>,
    x_ref_traj: &DVector<f64>,
    u_prev: &DVector<f64>,
    cfg: &MpcConfig,
    corridor: &Corridor,
) -> Result<QpProblem> {
    let n_s = cfg.n_states();
    let n_c = cfg.n_inputs();
    let hp = cfg.hp;
    let hc = cfg.hc;
    let dim = n_c * hc;
    if x_ref_traj.len() != n_s * hp {
        return Err(Error::DimensionMismatch {
            context: "stacked reference",
            expected: n_s * hp,
            got: x_ref_traj.len(),
        });
    }
    if psi_now.len() != pm.sx.ncols() {
        return Err(Error::DimensionMismatch {
            context: "lifted state",
            expected: pm.sx.ncols(),
            got: psi_now.len(),
        });
    }
    if u_prev.len() != n_c || corridor.u_ref.len() != n_c {
        return Err(Error::DimensionMismatch {
            context: "previous input / corridor",
            expected: n_c,
            got: u_prev.len(),
        });
    }

    let q_bar = block_diag(&cfg.q, hp);
    let r_bar = block_diag(&cfg.r, hc);
    let s_bar = block_diag(&cfg.s, hc);
    let l = difference_operator(n_c, hc);
    let s_delta = l.transpose() * &s_bar * &l;

    let mut h = (pm.su.transpose() * &q_bar * &pm.su + &r_bar + &s_delta) * 2.0;
    h = (&h + h.transpose()) * 0.5;

    let free_resp = &pm.sx * psi_now;
    let err0 = &free_resp - x_ref_traj;
    // Rate-penalty coupling to the previously applied input enters only the
    // first move's block.
    let mut m_prev = DVector::zeros(dim);
    m_prev.rows_mut(0, n_c).copy_from(&(&cfg.s * u_prev));
    let f = pm.su.transpose() * (&q_bar * &err0) * 2.0 - l.transpose() * &m_prev * 2.0;

    // Intersect the corridor with the box; collapse empty channels onto the
    // nearest box face.
    let mut lo = DVector::zeros(n_c);
    let mut up = DVector::zeros(n_c);
    let mut repaired = Vec::new();
    for j in 0..n_c {
        let mut l_j = corridor.lower[j].max(cfg.u_min[j]);
        let mut u_j = corridor.upper[j].min(cfg.u_max[j]);
        if l_j != corridor.lower[j] || u_j != corridor.upper[j] {
            repaired.push(j);
        }
        if l_j > u_j {
            let face = if corridor.u_ref[j] < cfg.u_min[j] {
                cfg.u_min[j]
            } else {
                cfg.u_max[j]
            };
            l_j = face;
            u_j = face;
            if !repaired.contains(&j) {
                repaired.push(j);
            }
        }
        lo[j] = l_j;
        up[j] = u_j;
    }

    let mut pinned: Vec<(usize, f64)> = Vec::new();
    // Disturbance channels: pinned to the last measured value on all moves.
    for &c in &cfg.disturbance_channels {
        for mv in 0..hc {
            pinned.push((mv * n_c + c, u_prev[c]));
        }
    }
    // Degenerate corridor channels pin the first move exactly.
    for j in 0..n_c {
        let idx = j; // first move
        if (up[j] - lo[j]).abs() <= 1e-12 && !pinned.iter().any(|&(i, _)| i == idx) {
            pinned.push((idx, 0.5 * (lo[j] + up[j])));
        }
    }

    // Box rows on every move, then corridor rows on the first move.
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for mv in 0..hc {
        for j in 0..n_c {
            rows.push((vec![(mv * n_c + j, 1.0)], cfg.u_max[j]));
            rows.push((vec![(mv * n_c + j, -1.0)], -cfg.u_min[j]));
        }
    }
    for j in 0..n_c {
        if (up[j] - lo[j]).abs() <= 1e-12 {
            continue; // pinned instead
        }
        rows.push((vec![(j, 1.0)], up[j]));
        rows.push((vec![(j, -1.0)], -lo[j]));
    }
    let mut g = DMatrix::zeros(rows.len(), dim);
    let mut h_vec = DVector::zeros(rows.len());
    for (r, (coefs, rhs)) in rows.iter().enumerate() {
        for &(c, v) in coefs {
            g[(r, c)] = v;
        }
        h_vec[r] = *rhs;
    }

    Ok(QpProblem {
        h,
        f,
        g,
        h_vec,
        pinned,
        repaired_channels: repaired,
    })
}

/// Where the first-move corridor comes from.
pub enum CorridorSource<'a> {
    /// Full HPC path: KNN reference control scaled by model confidence.
    Hpc {
        db: &'a HistoryDatabase,
        cfg: &'a CorridorConfig,
    },
    /// Advisor-mode path: corridor around the actually applied input.
    Advisor {
        u_actual: &'a DVector<f64>,
        u_range: &'a DVector<f64>,
    },
    /// Externally supplied corridor.
    Fixed(Corridor),
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub cost: f64,
    pub qp_status: QpStatus,
    pub active_set: Vec<usize>,
    pub corridor: Corridor,
    pub confidence: f64,
    /// Set when the QP failed and the corridor center was applied instead.
    pub fallback: bool,
    /// Set when the KNN weights underflowed to the nearest neighbor.
    pub reference_fallback: bool,
    pub repaired_channels: Vec<usize>,
    /// Full optimized move sequence, usable as next step's warm start.
    pub u_sequence: DVector<f64>,
}

pub struct ControlOutcome {
    pub u_apply: DVector<f64>,
    pub diagnostics: StepDiagnostics,
}

/// Eliminates pinned decision variables, solves the reduced QP, and
/// reassembles the full move sequence.
fn solve_with_pins(
    prob: &QpProblem,
    warm_start: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, qp::QpSolution)> {
    let dim = prob.f.len();
    let mut fixed = vec![None; dim];
    for &(i, v) in &prob.pinned {
        fixed[i] = Some(v);
    }
    let free: Vec<usize> = (0..dim).filter(|&i| fixed[i].is_none()).collect();
    if free.is_empty() {
        let u = DVector::from_fn(dim, |i, _| fixed[i].unwrap());
        let cost = 0.5 * u.dot(&(&prob.h * &u)) + prob.f.dot(&u);
        let sol = qp::QpSolution {
            u_star: DVector::zeros(0),
            cost,
            active_set: Vec::new(),
            multipliers: Vec::new(),
            iterations: 0,
            status: QpStatus::Optimal,
        };
        return Ok((u, sol));
    }
    let mut v_full = DVector::zeros(dim);
    for (i, fv) in fixed.iter().enumerate() {
        if let Some(v) = fv {
            v_full[i] = *v;
        }
    }
    let nf = free.len();
    let h_ff = DMatrix::from_fn(nf, nf, |r, c| prob.h[(free[r], free[c])]);
    let hv_full = &prob.h * &v_full;
    let f_f = DVector::from_fn(nf, |r, _| prob.f[free[r]] + hv_full[free[r]]);

    // Reduced constraint rows; drop rows without free coefficients.
    let gv = &prob.g * &v_full;
    let mut kept_rows = Vec::new();
    for r in 0..prob.g.nrows() {
        let has_free = free.iter().any(|&c| prob.g[(r, c)] != 0.0);
        if has_free {
            kept_rows.push(r);
        }
    }
    let g_f = DMatrix::from_fn(kept_rows.len(), nf, |r, c| prob.g[(kept_rows[r], free[c])]);
    let h_f = DVector::from_fn(kept_rows.len(), |r, _| prob.h_vec[kept_rows[r]] - gv[kept_rows[r]]);

    let warm_f = warm_start
        .filter(|w| w.len() == dim)
        .map(|w| DVector::from_fn(nf, |r, _| w[free[r]]));
    let sol = qp::solve(&h_ff, &f_f, &g_f, &h_f, warm_f.as_ref())?;

    let mut u = v_full;
    for (r, &i) in free.iter().enumerate() {
        if sol.status != QpStatus::Infeasible {
            u[i] = sol.u_star[r];
        }
    }
    Ok((u, sol))
}

/// One receding-horizon step: lift the state, derive the corridor, build and
/// solve the QP, return the first move. On solver failure the corridor
/// center (clipped into the box) is applied and flagged.
pub fn control_step(
    model: &LiftedModel,
    source: &CorridorSource<'_>,
    x_now: &DVector<f64>,
    x_ref: &DVector<f64>,
    u_prev: &DVector<f64>,
    cfg: &MpcConfig,
    dict: &Dictionary,
    warm_start: Option<&DVector<f64>>,
) -> Result<ControlOutcome> {
    let n_s = cfg.n_states();
    let n_c = cfg.n_inputs();
    let psi = dict.lift(x_now)?;
    let confidence = model.confidence();

    let mut reference_fallback = false;
    let corridor = match source {
        CorridorSource::Hpc { db, cfg: ccfg } => {
            let r = db.reference_control(&psi, ccfg)?;
            reference_fallback = r.nearest_fallback;
            crate::history::corridor(&r.u_ref, confidence, ccfg)
        }
        CorridorSource::Advisor { u_actual, u_range } => advisor_corridor(u_actual, u_range),
        CorridorSource::Fixed(c) => c.clone(),
    };

    let pm = build_prediction(model, cfg, n_s)?;
    let x_ref_traj = expand_reference(x_ref, n_s, cfg.hp)?;
    let prob = build_qp(&pm, &psi, &x_ref_traj, u_prev, cfg, &corridor)?;

    let solved = solve_with_pins(&prob, warm_start);
    let (u_seq, sol, fallback) = match solved {
        Ok((u_seq, sol)) if sol.status == QpStatus::Optimal => (u_seq, sol, false),
        Ok((_, sol)) => {
            let u = fallback_input(&corridor, cfg, u_prev);
            let mut seq = DVector::zeros(n_c * cfg.hc);
            for mv in 0..cfg.hc {
                seq.rows_mut(mv * n_c, n_c).copy_from(&u);
            }
            (seq, sol, true)
        }
        Err(_) => {
            let u = fallback_input(&corridor, cfg, u_prev);
            let mut seq = DVector::zeros(n_c * cfg.hc);
            for mv in 0..cfg.hc {
                seq.rows_mut(mv * n_c, n_c).copy_from(&u);
            }
            let sol = qp::QpSolution {
                u_star: DVector::zeros(0),
                cost: f64::NAN,
                active_set: Vec::new(),
                multipliers: Vec::new(),
                iterations: 0,
                status: QpStatus::MaxIter,
            };
            (seq, sol, true)
        }
    };
    let u_apply = u_seq.rows(0, n_c).into_owned();

    Ok(ControlOutcome {
        u_apply,
        diagnostics: StepDiagnostics {
            cost: sol.cost,
            qp_status: sol.status,
            active_set: sol.active_set,
            corridor,
            confidence,
            fallback,
            reference_fallback,
            repaired_channels: prob.repaired_channels,
            u_sequence: u_seq,
        },
    })
}

/// Safe fallback: corridor center clipped into the physical box, with
/// disturbance channels held at their measured value.
fn fallback_input(corridor: &Corridor, cfg: &MpcConfig, u_prev: &DVector<f64>) -> DVector<f64> {
    let n_c = cfg.n_inputs();
    let mut u = DVector::zeros(n_c);
    for j in 0..n_c {
        let center = 0.5 * (corridor.lower[j] + corridor.upper[j]);
        u[j] = center.clamp(cfg.u_min[j], cfg.u_max[j]);
    }
    for &c in &cfg.disturbance_channels {
        u[c] = u_prev[c].clamp(cfg.u_min[c], cfg.u_max[c]);
    }
    u
}
