//! Dense convex QP solver: primal active-set method for strictly convex
//! objectives under linear inequality constraints,
//!
//! ```text
//!     minimize   1/2 u' H u + f' u
//!     subject to G u <= h
//! ```
//!
//! with `H` symmetric positive definite. Equality-constrained subproblems
//! are solved via a Cholesky factorization of `H` and a Schur complement
//! over the working set; the working set is refactorized each iteration
//! (problem sizes here are tens of variables at most).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-11;
const MULT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    pub cost: f64,
    /// Indices of constraint rows active at termination.
    pub active_set: Vec<usize>,
    /// Lagrange multipliers aligned with `active_set`.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub status: QpStatus,
}

/// Solves the QP. `warm_start`, when feasible, seeds both the iterate and
/// the initial working set (constraints active at the point); an identical
/// re-solve from the previous optimum then terminates immediately.
pub fn solve(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    warm_start: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    let n = h.nrows();
    if h.ncols() != n || f.len() != n {
        return Err(Error::DimensionMismatch {
            context: "qp objective",
            expected: n,
            got: f.len(),
        });
    }
    if g.nrows() != h_vec.len() || (g.nrows() > 0 && g.ncols() != n) {
        return Err(Error::DimensionMismatch {
            context: "qp constraints",
            expected: g.nrows(),
            got: h_vec.len(),
        });
    }
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("QP Hessian is not positive definite".into()))?;

    // Candidate start: warm start, else the unconstrained minimizer.
    let unconstrained = chol.solve(&(-f));
    let x0 = match warm_start {
        Some(w) if w.len() == n && is_feasible(g, h_vec, w) => w.clone(),
        _ if is_feasible(g, h_vec, &unconstrained) => unconstrained.clone(),
        _ => match phase1(g, h_vec, &unconstrained)? {
            Some(x) => x,
            None => {
                return Ok(QpSolution {
                    u_star: unconstrained,
                    cost: f64::NAN,
                    active_set: Vec::new(),
                    multipliers: Vec::new(),
                    iterations: 0,
                    status: QpStatus::Infeasible,
                })
            }
        },
    };
    solve_from_feasible(h, &chol, f, g, h_vec, x0)
}

fn is_feasible(g: &DMatrix<f64>, h_vec: &DVector<f64>, x: &DVector<f64>) -> bool {
    (0..g.nrows()).all(|i| g.row(i).transpose().dot(x) <= h_vec[i] + FEAS_TOL)
}

/// Big-M feasibility search: minimize a slack bounding the worst violation.
/// Returns a feasible point or `None` when the region is empty.
fn phase1(
    g: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    x_hint: &DVector<f64>,
) -> Result<Option<DVector<f64>>> {
    let n = g.ncols();
    let m = g.nrows();
    // Keep the penalty-to-curvature ratio moderate: conditioning of the
    // phase-1 QP limits how accurately the active set can be tracked.
    let eps = 1e-3;
    let big_m = 1e4;
    // Variables (x, s): minimize eps/2 |x|^2 + eps/2 s^2 + M s
    // subject to G x - s 1 <= h, -s <= 0.
    let mut h_aug = DMatrix::identity(n + 1, n + 1) * eps;
    h_aug[(n, n)] = eps;
    let mut f_aug = DVector::zeros(n + 1);
    f_aug[n] = big_m;
    let mut g_aug = DMatrix::zeros(m + 1, n + 1);
    g_aug.view_mut((0, 0), (m, n)).copy_from(g);
    for i in 0..m {
        g_aug[(i, n)] = -1.0;
    }
    g_aug[(m, n)] = -1.0;
    let mut h_vec_aug = DVector::zeros(m + 1);
    h_vec_aug.rows_mut(0, m).copy_from(h_vec);

    let worst = (0..m)
        .map(|i| g.row(i).transpose().dot(x_hint) - h_vec[i])
        .fold(0.0f64, f64::max);
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(x_hint);
    start[n] = worst + 1.0;

    let chol = h_aug.clone().cholesky().expect("eps identity is SPD");
    let sol = solve_from_feasible(&h_aug, &chol, &f_aug, &g_aug, &h_vec_aug, start)?;
    if sol.u_star[n] <= 1e-6 {
        let mut x = sol.u_star.rows(0, n).into_owned();
        // Nudge residual slack into the interior where possible.
        if !is_feasible(g, h_vec, &x) {
            // Accept tiny violations from the relaxation.
            let worst = (0..m)
                .map(|i| g.row(i).transpose().dot(&x) - h_vec[i])
                .fold(0.0f64, f64::max);
            if worst > 1e-6 {
                return Ok(None);
            }
            // Project each violated row back by a least-squares correction.
            for i in 0..m {
                let gi = g.row(i).transpose();
                let viol = gi.dot(&x) - h_vec[i];
                if viol > 0.0 {
                    let nn = gi.norm_squared();
                    if nn > 0.0 {
                        x -= gi * (viol / nn);
                    }
                }
            }
            if !is_feasible(g, h_vec, &x) {
                return Ok(None);
            }
        }
        Ok(Some(x))
    } else {
        Ok(None)
    }
}

fn solve_from_feasible(
    h: &DMatrix<f64>,
    chol: &Cholesky<f64, Dyn>,
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    mut x: DVector<f64>,
) -> Result<QpSolution> {
    let n = h.nrows();
    let m = g.nrows();
    let max_iter = 100 * (n + m).max(1);

    // Seed the working set with independent rows active at the start point.
    let mut working: Vec<usize> = Vec::new();
    for i in 0..m {
        let r = g.row(i).transpose().dot(&x) - h_vec[i];
        if r.abs() <= FEAS_TOL && working.len() < n {
            working.push(i);
            if schur(chol, g, &working).is_none() {
                working.pop();
            }
        }
    }

    let mut iterations = 0;
    let mut status = QpStatus::MaxIter;
    let mut multipliers = Vec::new();
    // Consecutive iterations without movement; after enough of them switch
    // the drop rule to Bland's lowest-index rule, which cannot cycle.
    let mut stall = 0usize;
    let stall_limit = n + m + 2;

    while iterations < max_iter {
        iterations += 1;
        let grad = h * &x + f;
        let (p, mu) = eqp_step(chol, g, &working, &grad);

        // Stationarity is judged relative to the unconstrained step length:
        // the roundoff in `p` scales with |H^{-1} grad|, not with |x|.
        let step_scale = chol.solve(&grad).norm();
        if p.norm() <= STEP_TOL * (1.0 + x.norm()) + 1e-9 * step_scale {
            // Stationary on the working set: check multiplier signs.
            let candidates = mu.iter().enumerate().filter(|(_, &v)| v < -MULT_TOL);
            let neg = if stall > stall_limit {
                candidates
                    .min_by_key(|&(k, _)| working[k])
                    .map(|(k, _)| k)
            } else {
                candidates
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
            };
            if let Some(neg) = neg {
                working.remove(neg);
                stall += 1;
                continue;
            }
            multipliers = mu;
            status = QpStatus::Optimal;
            break;
        }

        // Largest step keeping all inactive constraints satisfied.
        let mut alpha = 1.0f64;
        let mut blocking: Option<usize> = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let gp = g.row(i).transpose().dot(&p);
            if gp > STEP_TOL {
                let slack = h_vec[i] - g.row(i).transpose().dot(&x);
                let ai = (slack / gp).max(0.0);
                if ai < alpha - 1e-14 {
                    alpha = ai;
                    blocking = Some(i);
                } else if (ai - alpha).abs() <= 1e-14 {
                    // Lowest index on ties.
                    blocking = Some(blocking.map_or(i, |b| b.min(i)));
                    alpha = alpha.min(ai);
                }
            }
        }
        if alpha > STEP_TOL {
            stall = 0;
        } else {
            stall += 1;
        }
        x += &p * alpha;
        if let Some(i) = blocking {
            if alpha < 1.0 {
                if working.len() < n {
                    working.push(i);
                    if schur(chol, g, &working).is_some() {
                        restore_activity(g, h_vec, &working, &mut x);
                        continue;
                    }
                    working.pop();
                }
                // Row i is dependent on the working rows (or the set is
                // full): exchange it for the working row with the largest
                // coefficient in its representation, keeping independence.
                if let Some(r) = dependent_exchange_row(g, &working, i) {
                    working[r] = i;
                }
            }
        }
        // Null-space steps drift off the working constraints when H is
        // poorly conditioned; restore exact activity each iteration.
        restore_activity(g, h_vec, &working, &mut x);
    }

    let cost = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
    Ok(QpSolution {
        u_star: x,
        cost,
        active_set: working,
        multipliers,
        iterations,
        status,
    })
}

/// For a row `i` linearly dependent on the working rows, finds the working
/// entry with the largest coefficient in the least-squares representation
/// `g_i ≈ G_W' c`; swapping that entry for `i` keeps the set independent.
fn dependent_exchange_row(g: &DMatrix<f64>, working: &[usize], i: usize) -> Option<usize> {
    let k = working.len();
    if k == 0 {
        return None;
    }
    let n = g.ncols();
    let mut gw = DMatrix::zeros(k, n);
    for (r, &w) in working.iter().enumerate() {
        gw.row_mut(r).copy_from(&g.row(w));
    }
    let gi = g.row(i).transpose();
    let gram = &gw * gw.transpose();
    let c = gram.cholesky()?.solve(&(&gw * &gi));
    let (r, best) = c
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
    if best.abs() < 1e-10 {
        return None;
    }
    Some(r)
}

/// Minimum-norm correction putting `x` exactly onto the working-set
/// hyperplanes: `x -= G_W'(G_W G_W')^{-1}(G_W x - h_W)`.
fn restore_activity(g: &DMatrix<f64>, h_vec: &DVector<f64>, working: &[usize], x: &mut DVector<f64>) {
    let k = working.len();
    if k == 0 {
        return;
    }
    let n = g.ncols();
    let mut gw = DMatrix::zeros(k, n);
    let mut resid = DVector::zeros(k);
    for (r, &i) in working.iter().enumerate() {
        gw.row_mut(r).copy_from(&g.row(i));
        resid[r] = g.row(i).transpose().dot(x) - h_vec[i];
    }
    if resid.amax() == 0.0 {
        return;
    }
    let gram = &gw * gw.transpose();
    if let Some(ch) = gram.cholesky() {
        let y = ch.solve(&resid);
        *x -= gw.transpose() * y;
    }
}

/// Cholesky of the working-set Schur complement `G_W H^{-1} G_W'`, or
/// `None` when the rows are dependent.
fn schur(
    chol: &Cholesky<f64, Dyn>,
    g: &DMatrix<f64>,
    working: &[usize],
) -> Option<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
    let k = working.len();
    let n = g.ncols();
    let mut gw = DMatrix::zeros(k, n);
    for (r, &i) in working.iter().enumerate() {
        gw.row_mut(r).copy_from(&g.row(i));
    }
    let y = chol.solve(&gw.transpose()); // H^{-1} G_W'
    let s = &gw * &y;
    let sc = s.cholesky()?;
    Some((gw, sc))
}

/// Equality-constrained step: minimize `1/2 p'Hp + grad'p` subject to
/// `G_W p = 0`. Returns the step and the working-set multipliers.
fn eqp_step(
    chol: &Cholesky<f64, Dyn>,
    g: &DMatrix<f64>,
    working: &[usize],
    grad: &DVector<f64>,
) -> (DVector<f64>, Vec<f64>) {
    if working.is_empty() {
        return (chol.solve(&(-grad)), Vec::new());
    }
    match schur(chol, g, working) {
        Some((gw, sc)) => {
            let hinv_grad = chol.solve(grad);
            let mu = sc.solve(&(-(&gw * &hinv_grad)));
            // A full working set leaves no null space: the step is exactly
            // zero, and computing it numerically only produces noise.
            let p = if working.len() == grad.len() {
                DVector::zeros(grad.len())
            } else {
                -chol.solve(&(grad + gw.transpose() * &mu))
            };
            (p, mu.iter().copied().collect())
        }
        None => (DVector::zeros(grad.len()), Vec::new()),
    }
}
