//! Hankel matrices, persistency of excitation and per-agent data views.
//!
//! Signals are stored as matrices with one column per sample.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, RANK_TOL};
use crate::network::{SystemLayout, Trajectory};
use crate::par::{self, Execution};

/// Depth-`depth` block Hankel matrix of `signal` (`k × T`).
///
/// Block `(r, c)` is the sample `w(r + c)`, giving a `k·depth × (T - depth + 1)` matrix.
pub fn hankel(signal: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>> {
    let (k, len) = signal.shape();
    if depth == 0 || depth > len {
        return Err(Error::Dimension(format!(
            "Hankel depth {depth} needs 1 <= depth <= signal length {len}"
        )));
    }
    let cols = len - depth + 1;
    let mut h = DMatrix::zeros(k * depth, cols);
    for r in 0..depth {
        h.view_mut((r * k, 0), (k, cols)).copy_from(&signal.columns(r, cols));
    }
    Ok(h)
}

/// Outcome of a persistency-of-excitation test.
#[derive(Debug, Clone, PartialEq)]
pub struct PeOutcome {
    pub order: usize,
    pub signal_dim: usize,
    pub length: usize,
    /// Numerical rank of the Hankel matrix, `None` if the length test already failed.
    pub rank: Option<usize>,
    pub passed: bool,
}

impl PeOutcome {
    pub fn required_rank(&self) -> usize {
        self.signal_dim * self.order
    }

    /// Shortest length for which full row rank is possible: `(k + 1)t - 1`.
    pub fn required_length(&self) -> usize {
        ((self.signal_dim + 1) * self.order).saturating_sub(1)
    }
}

/// Full PE test with diagnostics, at relative rank tolerance `tol`.
pub fn pe_outcome(signal: &DMatrix<f64>, order: usize, tol: f64) -> PeOutcome {
    let (k, len) = signal.shape();
    let mut out = PeOutcome {
        order,
        signal_dim: k,
        length: len,
        rank: None,
        passed: false,
    };
    if k == 0 || order == 0 || len < out.required_length() {
        return out;
    }
    let h = match hankel(signal, order) {
        Ok(h) => h,
        Err(_) => return out,
    };
    let sv = linalg::singular_values(&h);
    let max = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| max > 0.0 && s > tol * max).count();
    out.rank = Some(rank);
    out.passed = rank == k * order;
    out
}

/// True iff the depth-`order` Hankel matrix of `signal` has full row rank.
///
/// An empty (zero-dimensional) signal is never persistently exciting.
pub fn is_persistently_exciting(signal: &DMatrix<f64>, order: usize, tol: f64) -> bool {
    pe_outcome(signal, order, tol).passed
}

/// Global identifiability test: the full input record is PE of order `n + τ`.
pub fn check_condition_i(inputs: &DMatrix<f64>, n: usize, depth: usize) -> PeOutcome {
    pe_outcome(inputs, n + depth, RANK_TOL)
}

/// Per-node identifiability test using only data local to each node.
///
/// Actuated node `i` tests `col(u_i, x_{N_i})`, unactuated nodes test
/// `x_{N_i}`, both at order `n_i + τ`.
pub fn check_condition_ii(views: &[AgentDataView], depth: usize) -> Vec<PeOutcome> {
    par::map_indexed(Execution::Auto, views.len(), |k| {
        let v = &views[k];
        let rows = v.input_dim() + v.neighbor_state_dim();
        let signal = v.signal().rows(0, rows).into_owned();
        pe_outcome(&signal, v.state_dim() + depth, RANK_TOL)
    })
}

/// The slice `w_i` of the recorded data that node `i` owns.
///
/// Per sample it holds `col(u_i, x_{N_i}, x_i)`, neighbors ascending; `u_i`
/// is absent for unactuated nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDataView {
    node: usize,
    /// Indices into the per-sample global vector `col(u, x)`.
    selection: Vec<usize>,
    /// `(j, n_j)` for each neighbor, ascending.
    neighbors: Vec<(usize, usize)>,
    segments: [usize; 3],
    signal: DMatrix<f64>,
}

impl AgentDataView {
    pub fn new(layout: &SystemLayout, node: usize, trajectory: &Trajectory) -> Result<Self> {
        if node >= layout.node_count() {
            return Err(Error::Layout(format!("node {node} is not in the layout")));
        }
        if trajectory.inputs.nrows() != layout.m() || trajectory.states.nrows() != layout.n() {
            return Err(Error::Layout("trajectory does not match the system layout".into()));
        }
        let m = layout.m();
        let mut selection = Vec::new();
        if let Some(r) = layout.input_range(node) {
            selection.extend(r);
        }
        let mut neighbor_dim = 0;
        let mut neighbors = Vec::new();
        for &j in layout.graph().neighbors(node) {
            selection.extend(layout.state_range(j).map(|r| m + r));
            neighbor_dim += layout.state_dim(j);
            neighbors.push((j, layout.state_dim(j)));
        }
        selection.extend(layout.state_range(node).map(|r| m + r));
        let segments = [layout.input_dim(node), neighbor_dim, layout.state_dim(node)];
        let signal = select_rows(&selection, trajectory, m);
        Ok(AgentDataView {
            node,
            selection,
            neighbors,
            segments,
            signal,
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn is_actuated(&self) -> bool {
        self.segments[0] > 0
    }

    /// `(j, n_j)` for each neighbor, ascending.
    pub fn neighbors(&self) -> &[(usize, usize)] {
        &self.neighbors
    }

    pub fn input_dim(&self) -> usize {
        self.segments[0]
    }

    pub fn neighbor_state_dim(&self) -> usize {
        self.segments[1]
    }

    pub fn state_dim(&self) -> usize {
        self.segments[2]
    }

    /// Per-sample dimension of `w_i`.
    pub fn sample_dim(&self) -> usize {
        self.segments.iter().sum()
    }

    /// Index list `E_i` into the per-sample global vector `col(u, x)`.
    pub fn selection(&self) -> &[usize] {
        &self.selection
    }

    /// `w_i` over the whole record, one column per sample.
    pub fn signal(&self) -> &DMatrix<f64> {
        &self.signal
    }

    /// Applies `E_i` to one global sample `col(u, x)`.
    pub fn select(&self, global: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.selection.len(), self.selection.iter().map(|&k| global[k]))
    }

    /// Applies `E_i` to every sample of `trajectory`.
    pub fn select_trajectory(&self, trajectory: &Trajectory) -> DMatrix<f64> {
        select_rows(&self.selection, trajectory, trajectory.inputs.nrows())
    }

    /// Stacks a window of local samples in Hankel row order: segment by
    /// segment, and sample by sample inside each segment.
    pub fn stack_window(&self, window: &DMatrix<f64>) -> DVector<f64> {
        let len = window.ncols();
        let mut out = DVector::zeros(self.sample_dim() * len);
        let mut row = 0;
        let mut offset = 0;
        for &d in &self.segments {
            for t in 0..len {
                out.rows_mut(row, d).copy_from(&window.view((offset, t), (d, 1)));
                row += d;
            }
            offset += d;
        }
        out
    }
}

fn select_rows(selection: &[usize], trajectory: &Trajectory, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(selection.len(), trajectory.len(), |r, t| {
        let k = selection[r];
        if k < m {
            trajectory.inputs[(k, t)]
        } else {
            trajectory.states[(k - m, t)]
        }
    })
}

/// Hankel block `H_i = [H(u_i); H(x_{N_i}); H(x_i)]` of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelBlock {
    node: usize,
    depth: usize,
    segments: [usize; 3],
    matrix: DMatrix<f64>,
}

impl HankelBlock {
    pub fn from_view(view: &AgentDataView, depth: usize) -> Result<Self> {
        let mut parts = Vec::with_capacity(3);
        let mut offset = 0;
        for &d in &view.segments {
            let seg = view.signal.rows(offset, d).into_owned();
            parts.push(hankel(&seg, depth)?);
            offset += d;
        }
        let refs: Vec<_> = parts.iter().collect();
        Ok(HankelBlock {
            node: view.node,
            depth,
            segments: view.segments,
            matrix: linalg::vstack(&refs),
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Per-sample dimensions of the `u_i`, `x_{N_i}` and `x_i` segments.
    pub fn segments(&self) -> [usize; 3] {
        self.segments
    }

    /// First row of segment `s` (0: inputs, 1: neighbor states, 2: own state).
    pub fn segment_start(&self, s: usize) -> usize {
        self.segments[..s].iter().sum::<usize>() * self.depth
    }

    pub fn columns(&self) -> usize {
        self.matrix.ncols()
    }

    /// Orthonormal basis of the column space, at the shared rank tolerance.
    pub fn range_basis(&self) -> DMatrix<f64> {
        linalg::range_basis(&self.matrix)
    }
}

/// Builds every node's data view and depth-`depth` Hankel block.
pub fn build_agent_views(
    trajectory: &Trajectory,
    layout: &SystemLayout,
    depth: usize,
) -> Result<Vec<(AgentDataView, HankelBlock)>> {
    if depth == 0 || depth > trajectory.len() {
        return Err(Error::Dimension(format!(
            "Hankel depth {depth} exceeds the data length {}",
            trajectory.len()
        )));
    }
    par::map_indexed(Execution::Auto, layout.node_count(), |i| {
        let view = AgentDataView::new(layout, i, trajectory)?;
        let block = HankelBlock::from_view(&view, depth)?;
        Ok((view, block))
    })
    .into_iter()
    .collect()
}

/// Per-node least-squares distance `min_g ‖H_i g - w_i‖` of stacked candidate windows.
pub fn verify_membership(blocks: &[HankelBlock], candidates: &[DVector<f64>]) -> Result<Vec<f64>> {
    if blocks.len() != candidates.len() {
        return Err(Error::Dimension("one candidate per Hankel block is required".into()));
    }
    blocks
        .iter()
        .zip(candidates)
        .map(|(b, w)| {
            if w.len() != b.matrix.nrows() {
                return Err(Error::Dimension(format!(
                    "candidate for node {} has {} entries, Hankel block has {} rows",
                    b.node,
                    w.len(),
                    b.matrix.nrows()
                )));
            }
            let g = linalg::lstsq_min_norm(&b.matrix, w);
            Ok((&b.matrix * g - w).norm())
        })
        .collect()
}

/// Assembles the global window produced by one shared coefficient vector `g`.
///
/// Each node contributes its own `u_i` and `x_i` rows of `H_i g`.
pub fn combine_columns(layout: &SystemLayout, blocks: &[HankelBlock], g: &DVector<f64>) -> Result<Trajectory> {
    let depth = blocks
        .first()
        .map(|b| b.depth)
        .ok_or_else(|| Error::Dimension("no Hankel blocks".into()))?;
    let mut inputs = DMatrix::zeros(layout.m(), depth);
    let mut states = DMatrix::zeros(layout.n(), depth);
    for b in blocks {
        if b.columns() != g.len() || b.depth != depth {
            return Err(Error::Dimension("inconsistent Hankel blocks".into()));
        }
        let w = &b.matrix * g;
        let i = b.node;
        if let Some(r) = layout.input_range(i) {
            for t in 0..depth {
                let s = b.segment_start(0) + t * b.segments[0];
                inputs
                    .view_mut((r.start, t), (r.len(), 1))
                    .copy_from(&w.rows(s, r.len()));
            }
        }
        let r = layout.state_range(i);
        for t in 0..depth {
            let s = b.segment_start(2) + t * b.segments[2];
            states
                .view_mut((r.start, t), (r.len(), 1))
                .copy_from(&w.rows(s, r.len()));
        }
    }
    Ok(Trajectory {
        inputs,
        states,
        consistent: false,
    })
}
