//! Centralized reference solvers used to verify the distributed controller.
//!
//! These have full access to the system matrices and exist only for
//! testing and reporting; the controller never calls them.

pub mod suite;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use ddpc::controller::ClosedLoopLog;
use ddpc::linalg;
use ddpc::network::{NetworkSystem, SystemLayout, Trajectory};
use ddpc::problem::{assemble_prediction, network_qp, NodeProblem, NodeWeights, Prediction};

/// Normwise backward error above which an equality system is declared
/// infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-7;

/// `‖Ew - e‖ ≤ tol (‖e‖ + ‖E‖_F ‖w‖)`.
fn consistent(e: &DMatrix<f64>, w: &DVector<f64>, rhs: &DVector<f64>, residual: f64) -> bool {
    residual <= FEASIBILITY_TOL * (rhs.norm() + e.norm() * w.norm()).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("terminal constraint x(T) = 0 is unreachable from x0 in T steps (residual {residual:.3e})")]
    Unreachable { residual: f64 },
    #[error("the data cannot represent the initial window (residual {residual:.3e}); check persistency of excitation")]
    DataRankDeficient { residual: f64 },
    #[error("the initial window cannot be steered to x(T) = 0 (residual {residual:.3e})")]
    TerminalUnreachable { residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Core(#[from] ddpc::Error),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Optimizer of the finite-horizon LQR with terminal constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    /// `u*(0..T-1)`, one column per sample.
    pub inputs: DMatrix<f64>,
    /// `x*(0..T)`, with `x*(T) = 0`.
    pub states: DMatrix<f64>,
    pub cost: f64,
}

/// Global `Q = diag(Q_i)` and `R = diag(R_i)` over actuated nodes.
pub fn global_weights(layout: &SystemLayout, weights: &[NodeWeights]) -> (DMatrix<f64>, DMatrix<f64>) {
    let q: Vec<_> = weights.iter().map(|w| w.q.clone()).collect();
    let r: Vec<_> = (0..layout.node_count()).filter_map(|i| weights[i].r.clone()).collect();
    (linalg::block_diagonal(&q), linalg::block_diagonal(&r))
}

/// `Σ_{t<T} ‖x(t)‖²_Q + ‖u(t)‖²_R`.
pub fn lqr_cost(q: &DMatrix<f64>, r: &DMatrix<f64>, inputs: &DMatrix<f64>, states: &DMatrix<f64>) -> f64 {
    (0..inputs.ncols())
        .map(|t| {
            let x = states.column(t);
            let u = inputs.column(t);
            x.dot(&(q * x)) + u.dot(&(r * u))
        })
        .sum()
}

/// Solves `min Σ_{t<T} ‖x(t)‖²_Q + ‖u(t)‖²_R` subject to the dynamics,
/// `x(0) = x0` and `x(T) = 0` through its KKT system in `(u, x)`.
pub fn solve_lqr_kkt(
    system: &NetworkSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<LqrSolution> {
    let a = system.a_matrix();
    let b = system.b_matrix();
    let (n, m) = (a.nrows(), b.ncols());
    if q.shape() != (n, n) || r.shape() != (m, m) || x0.len() != n || horizon == 0 {
        return Err(OracleError::Dimension("LQR weights, x0 or horizon".into()));
    }
    let t = horizon;
    // variables: u(0..T-1) then x(0..T)
    let nu = m * t;
    let nv = nu + n * (t + 1);
    let xcol = |k: usize| nu + k * n;
    let mut cost = DMatrix::zeros(nv, nv);
    for k in 0..t {
        cost.view_mut((k * m, k * m), (m, m)).copy_from(r);
        cost.view_mut((xcol(k), xcol(k)), (n, n)).copy_from(q);
    }
    // rows: x(0) = x0, x(k+1) - A x(k) - B u(k) = 0, x(T) = 0
    let nc = n * (t + 2);
    let mut eq = DMatrix::zeros(nc, nv);
    let mut rhs = DVector::zeros(nc);
    eq.view_mut((0, xcol(0)), (n, n)).fill_with_identity();
    rhs.rows_mut(0, n).copy_from(x0);
    for k in 0..t {
        let row = n * (k + 1);
        eq.view_mut((row, xcol(k + 1)), (n, n)).fill_with_identity();
        eq.view_mut((row, xcol(k)), (n, n)).copy_from(&(-&a));
        eq.view_mut((row, k * m), (n, m)).copy_from(&(-&b));
    }
    eq.view_mut((n * (t + 1), xcol(t)), (n, n)).fill_with_identity();

    let (w, residual) = kkt_solve(&cost, &eq, &rhs);
    if !consistent(&eq, &w, &rhs, residual) {
        return Err(OracleError::Unreachable { residual });
    }
    let inputs = DMatrix::from_column_slice(m, t, w.rows(0, nu).as_slice());
    let states = DMatrix::from_column_slice(n, t + 1, w.rows(nu, n * (t + 1)).as_slice());
    let cost = lqr_cost(q, r, &inputs, &states);
    Ok(LqrSolution { inputs, states, cost })
}

/// Minimizes `w'Pw` subject to `Ew = e` by elimination: a least-squares
/// particular solution plus a correction within `ker E`. Returns the
/// minimizer and the equality residual `‖E w - e‖`.
///
/// Solving the reduced problem keeps the conditioning of `E` separate from
/// that of `P`; a single KKT factorization mixes the two scales.
fn kkt_solve(p: &DMatrix<f64>, e: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, f64) {
    let w0 = linalg::lstsq_min_norm(e, rhs);
    let null = null_space(e);
    let w = if null.ncols() == 0 {
        w0
    } else {
        let reduced = null.transpose() * p * &null;
        let grad = -(null.transpose() * (p * &w0));
        // cutoff relative to P: the reduced Hessian vanishes when the
        // constraints pin the costed coordinates
        let cutoff = linalg::RANK_TOL * linalg::spectral_norm(p).max(f64::MIN_POSITIVE);
        let y = reduced
            .svd(true, true)
            .solve(&grad, cutoff)
            .expect("both singular vector sets were computed");
        &w0 + &null * y
    };
    let residual = (e * &w - rhs).norm();
    (w, residual)
}

/// Orthonormal basis of `ker E` from the right singular vectors of `E`,
/// zero-padded to a square matrix so that the full set is computed.
fn null_space(e: &DMatrix<f64>) -> DMatrix<f64> {
    let nv = e.ncols();
    if nv == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut square = DMatrix::zeros(nv.max(e.nrows()), nv);
    square.view_mut((0, 0), e.shape()).copy_from(e);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let max = svd.singular_values.max();
    let null: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] <= linalg::RANK_TOL * max)
        .collect();
    DMatrix::from_fn(nv, null.len(), |r, c| v_t[(null[c], r)])
}

/// Exact optimizer of the assembled data-based QP.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepcSolution {
    pub z: Vec<DVector<f64>>,
    pub prediction: Prediction,
    pub cost: f64,
}

/// Exact solve of the agents' QP, with infeasibility classified as
/// either a data deficiency (initial window not representable) or an
/// unreachable terminal constraint.
pub fn solve_deepc_centralized(layout: &SystemLayout, problems: &[NodeProblem]) -> Result<DeepcSolution> {
    let qp = network_qp(problems)?;
    let p = qp.dense_cost();
    let e = qp.dense_constraints();
    let rhs = qp.dense_rhs();
    let (w, residual) = kkt_solve(&p, &e, &rhs);
    if !consistent(&e, &w, &rhs, residual) {
        let roff = qp.dual_offsets();
        let keep: Vec<usize> = problems
            .iter()
            .zip(&roff)
            .flat_map(|(pr, &o)| (0..pr.terminal_rows().start).map(move |r| o + r))
            .collect();
        let e2 = e.select_rows(keep.iter());
        let b2 = DVector::from_iterator(keep.len(), keep.iter().map(|&k| rhs[k]));
        let w2 = linalg::lstsq_min_norm(&e2, &b2);
        let r2 = (&e2 * &w2 - &b2).norm();
        return Err(if !consistent(&e2, &w2, &b2, r2) {
            OracleError::DataRankDeficient { residual: r2 }
        } else {
            OracleError::TerminalUnreachable { residual }
        });
    }
    let mut z = Vec::with_capacity(problems.len());
    let mut at = 0;
    for pr in problems {
        z.push(w.rows(at, pr.dim()).into_owned());
        at += pr.dim();
    }
    let cost = w.dot(&(&p * &w));
    Ok(DeepcSolution {
        prediction: assemble_prediction(layout, problems, &z),
        z,
        cost,
    })
}

/// `max_t ‖x(t+1) - A x(t) - B u(t)‖` over consecutive recorded samples.
pub fn verify_trajectory(system: &NetworkSystem, trajectory: &Trajectory) -> Result<f64> {
    let a = system.a_matrix();
    let b = system.b_matrix();
    if trajectory.inputs.ncols() != trajectory.states.ncols()
        || trajectory.states.nrows() != a.nrows()
        || trajectory.inputs.nrows() != b.ncols()
    {
        return Err(OracleError::Dimension("trajectory does not match the system".into()));
    }
    let len = trajectory.len();
    Ok((1..len)
        .map(|t| {
            (trajectory.states.column(t) - &a * trajectory.states.column(t - 1) - &b * trajectory.inputs.column(t - 1))
                .norm()
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDeviation {
    pub step: usize,
    /// `‖û(0) - u*(0)‖` at the logged state.
    pub input_deviation: f64,
    /// `‖û(0..T-1) - u*(0..T-1)‖` at the logged state.
    pub plan_deviation: f64,
    /// `‖x(t) - x_mpc(t)‖` between the logged and the exact closed loops.
    pub state_deviation: f64,
    pub tolerance: f64,
    /// Solver stopped on the certificate (converged, threshold not floored).
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcComparison {
    pub steps: Vec<StepDeviation>,
    /// Exact-MPC closed loop from the same initial state, `x(0..t_end)`.
    pub exact_states: Vec<DVector<f64>>,
}

impl MpcComparison {
    pub fn mean_input_deviation(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.input_deviation).sum::<f64>() / self.steps.len() as f64
    }

    /// Certified steps whose plan deviation reached the tolerance.
    pub fn violations(&self) -> Vec<&StepDeviation> {
        self.steps
            .iter()
            .filter(|s| s.certified && s.plan_deviation >= s.tolerance)
            .collect()
    }
}

/// Compares a logged closed loop with exact model-based MPC.
///
/// Each logged step is checked against the exact optimizer at the logged
/// state; separately the exact-MPC closed loop is simulated from the first
/// logged state for the same number of steps.
pub fn compare_to_exact_mpc(
    system: &NetworkSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    horizon: usize,
    log: &ClosedLoopLog,
) -> Result<MpcComparison> {
    let mut steps = Vec::with_capacity(log.records.len());
    let mut exact_states = Vec::with_capacity(log.records.len() + 1);
    let Some(first) = log.records.first() else {
        return Ok(MpcComparison {
            steps,
            exact_states: vec![log.final_state.clone()],
        });
    };
    let mut x_mpc = first.state.clone();
    for rec in &log.records {
        let local = solve_lqr_kkt(system, q, r, &rec.state, horizon)?;
        let plan = DVector::from_column_slice(local.inputs.as_slice());
        let u0 = local.inputs.column(0).into_owned();
        steps.push(StepDeviation {
            step: rec.step,
            input_deviation: (&rec.input - &u0).norm(),
            plan_deviation: (&rec.predicted_inputs - &plan).norm(),
            state_deviation: (&rec.state - &x_mpc).norm(),
            tolerance: rec.tolerance,
            certified: rec.converged && !rec.floored,
        });
        exact_states.push(x_mpc.clone());
        let exact = solve_lqr_kkt(system, q, r, &x_mpc, horizon)?;
        x_mpc = system.step(&x_mpc, &exact.inputs.column(0).into_owned())?;
    }
    exact_states.push(x_mpc);
    Ok(MpcComparison { steps, exact_states })
}
