//! Builds each agent's share of the data-based predictive control QP.
//!
//! Agent `i` decides `z_i = col(g_i, u_i, x_i)` where `u_i` and `x_i` are its
//! future inputs and states over `T + 1` samples (`u_i` is absent for
//! unactuated nodes). Its constraints are
//!
//! ```text
//! D_i g_i = col(u_i^ini, u_i, x_{N_i}^ini, x_{N_i}, x_i^ini, x_i)
//! x_i(T) = 0
//! ```
//!
//! with `D_i` either the Hankel block `H_i` or an orthonormal basis of its
//! range. Rows follow the Hankel row order, then the terminal rows. Rows of
//! initial samples carry data on the right-hand side; rows of future samples
//! put `-1` on the matching variable, which for `x_{N_i}` lives in a
//! neighbor's `z_j`. The cost is `Σ_{t<T} ‖u_i(t)‖²_{R_i} + ‖x_i(t)‖²_{Q_i}`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::data::{AgentDataView, HankelBlock};
use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{SystemLayout, Trajectory};
use crate::par::{self, Execution};
use crate::solver::{Coupling, NetworkQp, QpNode, SaddleSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizon {
    pub t_ini: usize,
    pub t: usize,
}

impl Horizon {
    pub fn new(t_ini: usize, t: usize) -> Result<Self> {
        if t_ini == 0 || t == 0 {
            return Err(Error::Parameter(format!(
                "T_ini and T must be positive (got {t_ini} and {t})"
            )));
        }
        Ok(Horizon { t_ini, t })
    }

    /// Hankel depth `τ = T_ini + T + 1`.
    pub fn depth(&self) -> usize {
        self.t_ini + self.t + 1
    }

    /// Future samples per signal, `T + 1`.
    pub fn future_len(&self) -> usize {
        self.t + 1
    }

    /// Shortest record allowing input persistency of excitation of order
    /// `n + τ`: `(n + m + 1)(T_ini + T) - 1`.
    pub fn min_data_length(&self, n: usize, m: usize) -> usize {
        (n + m + 1) * (self.t_ini + self.t) - 1
    }
}

/// Matrix whose columns parametrize the local trajectory set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataBasis {
    /// The Hankel block itself.
    #[default]
    Hankel,
    /// Orthonormal basis of the Hankel block's range (same feasible set, better conditioning).
    Orthonormal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeWeights {
    pub q: DMatrix<f64>,
    /// `None` for unactuated nodes.
    pub r: Option<DMatrix<f64>>,
}

pub fn identity_weights(layout: &SystemLayout) -> Vec<NodeWeights> {
    (0..layout.node_count())
        .map(|i| {
            let m = layout.input_dim(i);
            NodeWeights {
                q: DMatrix::identity(layout.state_dim(i), layout.state_dim(i)),
                r: (m > 0).then(|| DMatrix::identity(m, m)),
            }
        })
        .collect()
}

/// `(g_i, u_i, x_i)` split out of `z_i`; one column per future sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePrimal {
    pub g: DVector<f64>,
    pub inputs: DMatrix<f64>,
    pub states: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeProblem {
    node: usize,
    horizon: Horizon,
    segments: [usize; 3],
    neighbors: Vec<(usize, usize)>,
    g_dim: usize,
    /// `(row, window row, sample)` for every initial-sample row.
    ini_map: Vec<(usize, usize, usize)>,
    qp: QpNode,
}

pub fn build_node_problem(
    view: &AgentDataView,
    block: &HankelBlock,
    weights: &NodeWeights,
    horizon: Horizon,
    basis: DataBasis,
    ini_window: &DMatrix<f64>,
) -> Result<NodeProblem> {
    let depth = horizon.depth();
    if block.depth() != depth || block.node() != view.node() {
        return Err(Error::Layout(format!(
            "node {}: Hankel block depth {} does not match τ = {depth}",
            view.node(),
            block.depth()
        )));
    }
    let segments = block.segments();
    let [m_i, _, n_i] = segments;
    if weights.q.shape() != (n_i, n_i) {
        return Err(Error::Layout(format!("node {}: Q_i must be {n_i}x{n_i}", view.node())));
    }
    match (&weights.r, m_i) {
        (None, 0) => {}
        (Some(r), m) if m > 0 && r.shape() == (m, m) => {}
        _ => {
            return Err(Error::Layout(format!(
                "node {}: R_i does not match the input size",
                view.node()
            )))
        }
    }
    let data = match basis {
        DataBasis::Hankel => block.matrix().clone(),
        DataBasis::Orthonormal => block.range_basis(),
    };
    let g_dim = data.ncols();
    let fut = horizon.future_len();
    let u_off = g_dim;
    let x_off = g_dim + fut * m_i;
    let dim = x_off + fut * n_i;
    let hankel_rows = data.nrows();
    let rows = hankel_rows + n_i;

    let mut own = DMatrix::zeros(rows, dim);
    own.view_mut((0, 0), data.shape()).copy_from(&data);
    let mut couplings: Vec<Coupling> = view
        .neighbors()
        .iter()
        .map(|&(j, n_j)| Coupling {
            neighbor: j,
            block: DMatrix::zeros(rows, fut * n_j),
        })
        .collect();
    let mut ini_map = Vec::new();
    let mut row = 0;
    let mut window_row = 0;
    for (s, &d) in segments.iter().enumerate() {
        for t in 0..depth {
            for comp in 0..d {
                if t < horizon.t_ini {
                    ini_map.push((row, window_row + comp, t));
                } else {
                    let k = t - horizon.t_ini;
                    match s {
                        0 => own[(row, u_off + k * m_i + comp)] = -1.0,
                        1 => {
                            let (idx, c) = locate_neighbor(view.neighbors(), comp);
                            let n_j = view.neighbors()[idx].1;
                            couplings[idx].block[(row, k * n_j + c)] = -1.0;
                        }
                        _ => own[(row, x_off + k * n_i + comp)] = -1.0,
                    }
                }
                row += 1;
            }
        }
        window_row += d;
    }
    for c in 0..n_i {
        own[(hankel_rows + c, x_off + horizon.t * n_i + c)] = 1.0;
    }

    let mut cost = Vec::new();
    if let Some(r) = &weights.r {
        cost.push((u_off, linalg::repeat_diagonal(r, horizon.t)));
    }
    cost.push((x_off, linalg::repeat_diagonal(&weights.q, horizon.t)));

    let mut problem = NodeProblem {
        node: view.node(),
        horizon,
        segments,
        neighbors: view.neighbors().to_vec(),
        g_dim,
        ini_map,
        qp: QpNode {
            cost,
            own,
            couplings,
            rhs: DVector::zeros(rows),
            shared: x_off..dim,
        },
    };
    problem.set_ini(ini_window)?;
    Ok(problem)
}

fn locate_neighbor(neighbors: &[(usize, usize)], mut comp: usize) -> (usize, usize) {
    for (idx, &(_, n_j)) in neighbors.iter().enumerate() {
        if comp < n_j {
            return (idx, comp);
        }
        comp -= n_j;
    }
    unreachable!("neighbor component out of range")
}

impl NodeProblem {
    pub fn node(&self) -> usize {
        self.node
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn qp(&self) -> &QpNode {
        &self.qp
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.qp.rhs
    }

    pub fn dim(&self) -> usize {
        self.qp.dim()
    }

    pub fn constraint_count(&self) -> usize {
        self.qp.constraint_count()
    }

    pub fn g_dim(&self) -> usize {
        self.g_dim
    }

    pub fn input_dim(&self) -> usize {
        self.segments[0]
    }

    pub fn state_dim(&self) -> usize {
        self.segments[2]
    }

    /// `(j, n_j)` for each neighbor, ascending.
    pub fn neighbors(&self) -> &[(usize, usize)] {
        &self.neighbors
    }

    /// Rows pinning `x_i(T)` to zero.
    pub fn terminal_rows(&self) -> Range<usize> {
        let c = self.constraint_count();
        c - self.state_dim()..c
    }

    /// Columns of `u_i` inside `z_i`.
    pub fn input_columns(&self) -> Range<usize> {
        self.g_dim..self.g_dim + self.horizon.future_len() * self.input_dim()
    }

    /// Columns of `x_i` inside `z_i`; the block shared with neighbors.
    pub fn state_columns(&self) -> Range<usize> {
        self.qp.shared.clone()
    }

    /// Right-hand side for a local initial window (`T_ini` samples of
    /// `col(u_i, x_{N_i}, x_i)`).
    pub fn rhs_for(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        let dim: usize = self.segments.iter().sum();
        if window.shape() != (dim, self.horizon.t_ini) {
            return Err(Error::Layout(format!(
                "node {}: initial window must be {dim}x{} (got {}x{})",
                self.node,
                self.horizon.t_ini,
                window.nrows(),
                window.ncols()
            )));
        }
        let mut rhs = DVector::zeros(self.constraint_count());
        for &(row, wr, t) in &self.ini_map {
            rhs[row] = window[(wr, t)];
        }
        Ok(rhs)
    }

    /// Replaces the initial window; only the right-hand side changes.
    pub fn set_ini(&mut self, window: &DMatrix<f64>) -> Result<()> {
        self.qp.rhs = self.rhs_for(window)?;
        Ok(())
    }

    pub fn update_ini(&self, window: &DMatrix<f64>) -> Result<Self> {
        let mut next = self.clone();
        next.set_ini(window)?;
        Ok(next)
    }

    pub fn split(&self, z: &DVector<f64>) -> NodePrimal {
        let fut = self.horizon.future_len();
        let (m, n) = (self.input_dim(), self.state_dim());
        let u = self.input_columns();
        let x = self.state_columns();
        NodePrimal {
            g: z.rows(0, self.g_dim).into_owned(),
            inputs: DMatrix::from_column_slice(m, fut, z.rows(u.start, u.len()).as_slice()),
            states: DMatrix::from_column_slice(n, fut, z.rows(x.start, x.len()).as_slice()),
        }
    }

    pub fn compose(&self, primal: &NodePrimal) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, self.g_dim).copy_from(&primal.g);
        let u = self.input_columns();
        z.rows_mut(u.start, u.len()).copy_from_slice(primal.inputs.as_slice());
        let x = self.state_columns();
        z.rows_mut(x.start, x.len()).copy_from_slice(primal.states.as_slice());
        z
    }

    /// Warm start for the next step: future inputs and states move one
    /// sample earlier, the freed last sample is zero, `g_i` is kept.
    pub fn shift_primal(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut p = self.split(z);
        for mat in [&mut p.inputs, &mut p.states] {
            let len = mat.ncols();
            for t in 0..len {
                let next = if t + 1 < len {
                    mat.column(t + 1).into_owned()
                } else {
                    DVector::zeros(mat.nrows())
                };
                mat.set_column(t, &next);
            }
        }
        self.compose(&p)
    }
}

/// Builds every agent's problem for the global initial window `ini`
/// (`T_ini` samples); each agent only reads its own slice of it.
pub fn build_problems(
    views: &[(AgentDataView, HankelBlock)],
    weights: &[NodeWeights],
    horizon: Horizon,
    basis: DataBasis,
    ini: &Trajectory,
) -> Result<Vec<NodeProblem>> {
    if weights.len() != views.len() {
        return Err(Error::Layout("one weight pair per node is required".into()));
    }
    par::map_indexed(Execution::Auto, views.len(), |i| {
        let (view, block) = &views[i];
        let window = view.select_trajectory(ini);
        build_node_problem(view, block, &weights[i], horizon, basis, &window)
    })
    .into_iter()
    .collect()
}

pub fn network_qp(problems: &[NodeProblem]) -> Result<NetworkQp> {
    let horizon = problems
        .first()
        .map(|p| p.horizon)
        .ok_or_else(|| Error::Layout("no node problems".into()))?;
    for (i, p) in problems.iter().enumerate() {
        if p.node != i || p.horizon != horizon {
            return Err(Error::Layout(format!(
                "node problems must be ordered by node id and share one horizon (entry {i})"
            )));
        }
    }
    NetworkQp::new(problems.iter().map(|p| p.qp.clone()).collect())
}

/// Predicted global inputs and states, one column per future sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub inputs: DMatrix<f64>,
    pub states: DMatrix<f64>,
}

impl Prediction {
    /// First predicted input, the one applied by the controller.
    pub fn first_input(&self) -> DVector<f64> {
        self.inputs.column(0).into_owned()
    }

    /// Inputs over the cost horizon, `u(0..T-1)`, stacked.
    pub fn cost_inputs(&self) -> DVector<f64> {
        let t = self.inputs.ncols() - 1;
        DVector::from_column_slice(self.inputs.columns(0, t).into_owned().as_slice())
    }
}

pub fn assemble_prediction(layout: &SystemLayout, problems: &[NodeProblem], z: &[DVector<f64>]) -> Prediction {
    let fut = problems[0].horizon.future_len();
    let mut inputs = DMatrix::zeros(layout.m(), fut);
    let mut states = DMatrix::zeros(layout.n(), fut);
    for (p, zi) in problems.iter().zip(z) {
        let part = p.split(zi);
        if let Some(r) = layout.input_range(p.node) {
            inputs.view_mut((r.start, 0), (r.len(), fut)).copy_from(&part.inputs);
        }
        let r = layout.state_range(p.node);
        states.view_mut((r.start, 0), (r.len(), fut)).copy_from(&part.states);
    }
    Prediction { inputs, states }
}

/// Centralized data used by the stopping certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCertificateData {
    pub system: SaddleSystem,
    pub augmentation: f64,
    /// `‖M‖`.
    pub norm: f64,
    /// `‖M†‖`.
    pub pinv_norm: f64,
}

impl GlobalCertificateData {
    pub fn assemble(qp: &NetworkQp, augmentation: f64) -> Self {
        let system = SaddleSystem::assemble(qp, augmentation);
        let sv = linalg::singular_values(&system.m);
        GlobalCertificateData {
            norm: sv.first().copied().unwrap_or(0.0),
            pinv_norm: linalg::pinv_norm_from_singular_values(&sv),
            system,
            augmentation,
        }
    }
}

pub fn assemble_global(problems: &[NodeProblem], augmentation: f64) -> Result<GlobalCertificateData> {
    Ok(GlobalCertificateData::assemble(&network_qp(problems)?, augmentation))
}

/// Agent `i`'s local estimate of `‖M†‖`: the pseudoinverse norm of its
/// primal row block `[2Q_i, A_ii', A_ki' …]`, built from its own cost and
/// constraint blocks and the blocks of neighbors' constraints that touch `z_i`.
pub fn bound_pinv_norm(qp: &NetworkQp, i: usize) -> f64 {
    let node = qp.node(i);
    let d = node.dim();
    let mut parts: Vec<DMatrix<f64>> = Vec::new();
    let mut q2 = DMatrix::zeros(d, d);
    for (off, q) in &node.cost {
        q2.view_mut((*off, *off), q.shape()).copy_from(&(q * 2.0));
    }
    parts.push(q2);
    parts.push(node.own.transpose());
    for other in qp.nodes() {
        for c in other.couplings.iter().filter(|c| c.neighbor == i) {
            let mut t = DMatrix::zeros(d, other.constraint_count());
            t.view_mut((node.shared.start, 0), (node.shared.len(), other.constraint_count()))
                .copy_from(&c.block.transpose());
            parts.push(t);
        }
    }
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut row = DMatrix::zeros(d, cols);
    let mut at = 0;
    for p in &parts {
        row.view_mut((0, at), p.shape()).copy_from(p);
        at += p.ncols();
    }
    linalg::pinv_norm(&row)
}
