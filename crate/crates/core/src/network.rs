//! Partitioned linear network systems: topology, random instances, simulation
//! and the excitation policy used to record data.
//!
//! Node ids are 0-based. Each node `i` carries a state block `x_i` of
//! dimension `n_i` and, when actuated, an input block `u_i` of dimension
//! `m_i`. The dynamics of node `i` only involve its own state, the states of
//! its graph neighbors and its own input:
//!
//! ```text
//! x_i(t+1) = A_ii x_i(t) + Σ_{j ∈ N_i} A_ij x_j(t) + B_i u_i(t)
//! ```
//!
//! Global vectors stack node blocks in ascending node order, inputs only over
//! actuated nodes.

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::controller::Plant;
use crate::error::{Error, Result};
use crate::linalg;

/// Number of extra draws `NetworkSystem::sample` makes when a draw is not controllable.
pub const CONTROLLABILITY_RETRIES: usize = 10;

/// Spectral radius above which sampled `A` matrices are normalized.
const MAX_OPEN_LOOP_RADIUS: f64 = 2.0;

/// Width of the band `[1 - MARGINAL_BAND, 1]` targeted for the data-generation closed loop.
pub const MARGINAL_BAND: f64 = 0.02;

/// Undirected simple graph with sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSpec {
    /// Node 0 is the hub.
    Star {
        nodes: usize,
    },
    /// Ring lattice where each node links to `ring_degree / 2` nodes on either
    /// side, plus a random shortcut per ring edge with probability `shortcut_prob`.
    NewmanWattsStrogatz {
        nodes: usize,
        ring_degree: usize,
        shortcut_prob: f64,
    },
    EdgeList {
        nodes: usize,
        edges: Vec<(usize, usize)>,
    },
}

impl Graph {
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Parameter("graph needs at least one node".into()));
        }
        let mut sets = vec![BTreeSet::new(); nodes];
        for &(i, j) in edges {
            if i >= nodes || j >= nodes {
                return Err(Error::Parameter(format!(
                    "edge ({i}, {j}) references a node outside 0..{nodes}"
                )));
            }
            if i == j {
                return Err(Error::Parameter(format!("self-loop at node {i}")));
            }
            sets[i].insert(j);
            sets[j].insert(i);
        }
        Ok(Graph {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn star(nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Parameter("star graph needs at least 2 nodes".into()));
        }
        let edges: Vec<_> = (1..nodes).map(|leaf| (0, leaf)).collect();
        Self::from_edges(nodes, &edges)
    }

    /// Newman-Watts-Strogatz small-world graph.
    ///
    /// Ring edges are visited in order `(u, u + 1), …, (u, u + k/2)` for
    /// ascending `u`; each spawns a shortcut `(u, w)` with probability `p`,
    /// `w` uniform over nodes that are neither `u` nor already adjacent.
    pub fn newman_watts_strogatz(nodes: usize, k: usize, p: f64, seed: u64) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Parameter("graph needs at least 2 nodes".into()));
        }
        if k == 0 || !k.is_multiple_of(2) || k >= nodes {
            return Err(Error::Parameter(format!(
                "ring degree must be even with 0 < k < N (got k = {k}, N = {nodes})"
            )));
        }
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(Error::Parameter(format!(
                "shortcut probability must lie in [0, 1] (got {p})"
            )));
        }
        let ring: Vec<(usize, usize)> = (0..nodes)
            .flat_map(|u| (1..=k / 2).map(move |j| (u, (u + j) % nodes)))
            .collect();
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes];
        for &(u, v) in &ring {
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(u, _) in &ring {
            if rng.gen::<f64>() >= p {
                continue;
            }
            if sets[u].len() >= nodes - 1 {
                continue;
            }
            let w = loop {
                let w = rng.gen_range(0..nodes);
                if w != u && !sets[u].contains(&w) {
                    break w;
                }
            };
            sets[u].insert(w);
            sets[w].insert(u);
        }
        Ok(Graph {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted neighbor list of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}

pub fn build_graph(spec: &GraphSpec, seed: u64) -> Result<Graph> {
    match spec {
        GraphSpec::Star { nodes } => Graph::star(*nodes),
        GraphSpec::NewmanWattsStrogatz {
            nodes,
            ring_degree,
            shortcut_prob,
        } => Graph::newman_watts_strogatz(*nodes, *ring_degree, *shortcut_prob, seed),
        GraphSpec::EdgeList { nodes, edges } => {
            if *nodes < 2 {
                return Err(Error::Parameter("graph needs at least 2 nodes".into()));
            }
            Graph::from_edges(*nodes, edges)
        }
    }
}

/// Topology and dimensions of a network system, without its matrices.
///
/// This is everything an agent may know about the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemLayout {
    graph: Graph,
    state_dims: Vec<usize>,
    input_dims: Vec<usize>,
    state_offsets: Vec<usize>,
    input_offsets: Vec<Option<usize>>,
}

impl SystemLayout {
    /// `input_dims[i] == 0` marks node `i` as unactuated.
    pub fn new(graph: Graph, state_dims: Vec<usize>, input_dims: Vec<usize>) -> Result<Self> {
        let n = graph.node_count();
        if state_dims.len() != n || input_dims.len() != n {
            return Err(Error::Layout(format!(
                "expected {n} state and input dimensions, got {} and {}",
                state_dims.len(),
                input_dims.len()
            )));
        }
        if state_dims.contains(&0) {
            return Err(Error::Parameter("every node needs a positive state dimension".into()));
        }
        if input_dims.iter().all(|&d| d == 0) {
            return Err(Error::Parameter("actuated set must be non-empty".into()));
        }
        let mut state_offsets = Vec::with_capacity(n);
        let mut acc = 0;
        for &d in &state_dims {
            state_offsets.push(acc);
            acc += d;
        }
        let mut input_offsets = Vec::with_capacity(n);
        let mut acc = 0;
        for &d in &input_dims {
            if d > 0 {
                input_offsets.push(Some(acc));
                acc += d;
            } else {
                input_offsets.push(None);
            }
        }
        Ok(SystemLayout {
            graph,
            state_dims,
            input_dims,
            state_offsets,
            input_offsets,
        })
    }

    /// Layout with uniform state dimension and the given actuated nodes.
    pub fn uniform(graph: Graph, state_dim: usize, actuated: &[usize], input_dim: usize) -> Result<Self> {
        let n = graph.node_count();
        let mut input_dims = vec![0; n];
        for &i in actuated {
            if i >= n {
                return Err(Error::Parameter(format!("actuated node {i} is not in the graph")));
            }
            input_dims[i] = input_dim;
        }
        Self::new(graph, vec![state_dim; n], input_dims)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn state_dim(&self, i: usize) -> usize {
        self.state_dims[i]
    }

    pub fn input_dim(&self, i: usize) -> usize {
        self.input_dims[i]
    }

    pub fn state_dims(&self) -> &[usize] {
        &self.state_dims
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn is_actuated(&self, i: usize) -> bool {
        self.input_dims[i] > 0
    }

    /// Actuated nodes in ascending order.
    pub fn actuated(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.is_actuated(i)).collect()
    }

    /// Total state dimension `n`.
    pub fn n(&self) -> usize {
        self.state_dims.iter().sum()
    }

    /// Total input dimension `m`.
    pub fn m(&self) -> usize {
        self.input_dims.iter().sum()
    }

    pub fn state_range(&self, i: usize) -> Range<usize> {
        self.state_offsets[i]..self.state_offsets[i] + self.state_dims[i]
    }

    /// Rows of node `i`'s input inside the global input vector.
    pub fn input_range(&self, i: usize) -> Option<Range<usize>> {
        self.input_offsets[i].map(|o| o..o + self.input_dims[i])
    }
}

/// Partitioned linear system `x(t+1) = A x(t) + B u(t)` with graph-sparse `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSystem {
    layout: SystemLayout,
    a_self: Vec<DMatrix<f64>>,
    /// `a_neighbors[i][k]` is `A_ij` for `j = neighbors(i)[k]`.
    a_neighbors: Vec<Vec<DMatrix<f64>>>,
    b: Vec<Option<DMatrix<f64>>>,
}

impl NetworkSystem {
    pub fn from_blocks(
        layout: SystemLayout,
        a_self: Vec<DMatrix<f64>>,
        a_neighbors: Vec<Vec<DMatrix<f64>>>,
        b: Vec<Option<DMatrix<f64>>>,
    ) -> Result<Self> {
        let nodes = layout.node_count();
        if a_self.len() != nodes || a_neighbors.len() != nodes || b.len() != nodes {
            return Err(Error::Layout("one block list entry per node is required".into()));
        }
        for i in 0..nodes {
            let ni = layout.state_dim(i);
            if a_self[i].shape() != (ni, ni) {
                return Err(Error::Layout(format!("A_{i}{i} must be {ni}x{ni}")));
            }
            let nb = layout.graph().neighbors(i);
            if a_neighbors[i].len() != nb.len() {
                return Err(Error::Layout(format!("node {i} needs one A block per neighbor")));
            }
            for (blk, &j) in a_neighbors[i].iter().zip(nb) {
                if blk.shape() != (ni, layout.state_dim(j)) {
                    return Err(Error::Layout(format!("A_{i}{j} has the wrong shape")));
                }
            }
            match (&b[i], layout.input_dim(i)) {
                (None, 0) => {}
                (Some(bi), mi) if mi > 0 && bi.shape() == (ni, mi) => {}
                _ => return Err(Error::Layout(format!("B_{i} does not match the input layout"))),
            }
        }
        Ok(NetworkSystem {
            layout,
            a_self,
            a_neighbors,
            b,
        })
    }

    /// Extracts blocks from dense `(A, B)`. Entries outside the graph pattern must be zero.
    pub fn from_dense(layout: SystemLayout, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = (layout.n(), layout.m());
        if a.shape() != (n, n) || b.shape() != (n, m) {
            return Err(Error::Layout(format!("expected A {n}x{n} and B {n}x{m}")));
        }
        let nodes = layout.node_count();
        for i in 0..nodes {
            for j in 0..nodes {
                if i == j || layout.graph().has_edge(i, j) {
                    continue;
                }
                let ri = layout.state_range(i);
                let rj = layout.state_range(j);
                if a.view((ri.start, rj.start), (ri.len(), rj.len()))
                    .iter()
                    .any(|&v| v != 0.0)
                {
                    return Err(Error::Layout(format!(
                        "A couples nodes {i} and {j} which are not adjacent"
                    )));
                }
            }
        }
        let block = |i: usize, j: usize| {
            let ri = layout.state_range(i);
            let rj = layout.state_range(j);
            a.view((ri.start, rj.start), (ri.len(), rj.len())).into_owned()
        };
        let a_self = (0..nodes).map(|i| block(i, i)).collect();
        let a_neighbors = (0..nodes)
            .map(|i| layout.graph().neighbors(i).iter().map(|&j| block(i, j)).collect())
            .collect();
        let bs = (0..nodes)
            .map(|i| {
                layout.input_range(i).map(|ci| {
                    let ri = layout.state_range(i);
                    let off_diag = b
                        .view((0, ci.start), (n, ci.len()))
                        .row_iter()
                        .enumerate()
                        .any(|(r, row)| !ri.contains(&r) && row.iter().any(|&v| v != 0.0));
                    debug_assert!(!off_diag, "input of node {i} drives another node");
                    b.view((ri.start, ci.start), (ri.len(), ci.len())).into_owned()
                })
            })
            .collect();
        Self::from_blocks(layout, a_self, a_neighbors, bs)
    }

    /// Draws standard-normal blocks until the pair is controllable.
    ///
    /// When the assembled `A` has spectral radius above 2 every `A` block is
    /// divided by that radius.
    pub fn sample(layout: SystemLayout, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        for _ in 0..=CONTROLLABILITY_RETRIES {
            let nodes = layout.node_count();
            let mut a_self: Vec<DMatrix<f64>> = Vec::with_capacity(nodes);
            let mut a_neighbors: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(nodes);
            let mut b = Vec::with_capacity(nodes);
            for i in 0..nodes {
                let ni = layout.state_dim(i);
                a_self.push(normal(ni, ni));
                a_neighbors.push(
                    layout
                        .graph()
                        .neighbors(i)
                        .iter()
                        .map(|&j| normal(ni, layout.state_dim(j)))
                        .collect(),
                );
                let mi = layout.input_dim(i);
                b.push((mi > 0).then(|| normal(ni, mi)));
            }
            let mut sys = Self::from_blocks(layout.clone(), a_self, a_neighbors, b)?;
            let radius = linalg::spectral_radius(&sys.a_matrix());
            if radius > MAX_OPEN_LOOP_RADIUS {
                let scale = 1.0 / radius;
                sys.a_self.iter_mut().for_each(|m| *m *= scale);
                sys.a_neighbors.iter_mut().flatten().for_each(|m| *m *= scale);
            }
            if sys.is_controllable() {
                return Ok(sys);
            }
        }
        Err(Error::Generation(format!(
            "no controllable draw after {CONTROLLABILITY_RETRIES} resamples; \
             the requested dimensions are likely degenerate"
        )))
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn a_block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        if i == j {
            return Some(&self.a_self[i]);
        }
        let k = self.layout.graph().neighbors(i).binary_search(&j).ok()?;
        Some(&self.a_neighbors[i][k])
    }

    pub fn b_block(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.b[i].as_ref()
    }

    /// Assembled `A`.
    pub fn a_matrix(&self) -> DMatrix<f64> {
        let n = self.layout.n();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..self.layout.node_count() {
            let ri = self.layout.state_range(i);
            a.view_mut((ri.start, ri.start), (ri.len(), ri.len()))
                .copy_from(&self.a_self[i]);
            for (blk, &j) in self.a_neighbors[i].iter().zip(self.layout.graph().neighbors(i)) {
                let rj = self.layout.state_range(j);
                a.view_mut((ri.start, rj.start), blk.shape()).copy_from(blk);
            }
        }
        a
    }

    /// Assembled `B`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.layout.n(), self.layout.m());
        for i in 0..self.layout.node_count() {
            if let (Some(bi), Some(ci)) = (&self.b[i], self.layout.input_range(i)) {
                let ri = self.layout.state_range(i);
                b.view_mut((ri.start, ci.start), bi.shape()).copy_from(bi);
            }
        }
        b
    }

    /// Kalman rank test on the assembled pair.
    pub fn is_controllable(&self) -> bool {
        is_controllable(&self.a_matrix(), &self.b_matrix())
    }

    /// One step of the block-wise dynamics.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, m) = (self.layout.n(), self.layout.m());
        if x.len() != n || u.len() != m {
            return Err(Error::Layout(format!(
                "step expects x in R^{n} and u in R^{m}, got {} and {}",
                x.len(),
                u.len()
            )));
        }
        let mut next = DVector::zeros(n);
        for i in 0..self.layout.node_count() {
            let ri = self.layout.state_range(i);
            let mut xi = &self.a_self[i] * x.rows(ri.start, ri.len());
            for (blk, &j) in self.a_neighbors[i].iter().zip(self.layout.graph().neighbors(i)) {
                let rj = self.layout.state_range(j);
                xi += blk * x.rows(rj.start, rj.len());
            }
            if let (Some(bi), Some(ci)) = (&self.b[i], self.layout.input_range(i)) {
                xi += bi * u.rows(ci.start, ci.len());
            }
            next.rows_mut(ri.start, ri.len()).copy_from(&xi);
        }
        Ok(next)
    }

    /// Simulates from `x0` under `inputs` (one column per step).
    ///
    /// Returns the recorded trajectory (`L` inputs, states `x(0..L-1)`) and the
    /// state `x(L)` reached after the last input.
    pub fn simulate(&self, x0: &DVector<f64>, inputs: &DMatrix<f64>) -> Result<(Trajectory, DVector<f64>)> {
        if inputs.nrows() != self.layout.m() {
            return Err(Error::Layout(format!(
                "input sequence must have {} rows, got {}",
                self.layout.m(),
                inputs.nrows()
            )));
        }
        let len = inputs.ncols();
        let mut states = DMatrix::zeros(self.layout.n(), len);
        let mut x = x0.clone();
        for t in 0..len {
            states.set_column(t, &x);
            x = self.step(&x, &inputs.column(t).into_owned())?;
        }
        Ok((
            Trajectory {
                inputs: inputs.clone(),
                states,
                consistent: true,
            },
            x,
        ))
    }
}

/// Kalman rank test: `rank [B, AB, …, A^{n-1} B] == n`.
///
/// Columns are normalized before the rank decision; this leaves the rank
/// unchanged but keeps high powers of `A` from swamping the threshold.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let m = b.ncols();
    let mut kalman = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        kalman.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    for mut col in kalman.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    linalg::numerical_rank(&kalman) == n
}

/// Recorded input/state samples. Column `t` holds time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inputs: DMatrix<f64>,
    pub states: DMatrix<f64>,
    /// Set when the samples were produced by simulating the true dynamics.
    pub consistent: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Trajectory {
        Trajectory {
            inputs: self.inputs.columns(start, len).into_owned(),
            states: self.states.columns(start, len).into_owned(),
            consistent: self.consistent,
        }
    }
}

/// Excitation policy `u(t) = K x(t) + w(t)` with Gaussian dither `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataGenPolicy {
    pub gain: DMatrix<f64>,
    pub noise_scale: f64,
}

impl DataGenPolicy {
    /// Gain that places the closed loop at (or just inside) marginal stability.
    ///
    /// If `A` already has spectral radius at most one the gain is zero.
    /// Otherwise the discrete LQR gain `K` (identity weights) is scaled by the
    /// factor `α ∈ [0, 1]` for which `ρ(A + αBK)` lands in `[1 - MARGINAL_BAND, 1]`.
    pub fn for_system(system: &NetworkSystem, noise_scale: f64) -> Result<Self> {
        if !(noise_scale >= 0.0) {
            return Err(Error::Parameter(format!(
                "noise scale must be non-negative (got {noise_scale})"
            )));
        }
        let a = system.a_matrix();
        let b = system.b_matrix();
        let zero = DMatrix::zeros(b.ncols(), a.nrows());
        if linalg::spectral_radius(&a) <= 1.0 {
            return Ok(DataGenPolicy {
                gain: zero,
                noise_scale,
            });
        }
        let lqr = dlqr_gain(&a, &b)?;
        let radius = |alpha: f64| linalg::spectral_radius(&(&a + &b * (&lqr * alpha)));
        if radius(1.0) > 1.0 {
            return Err(Error::Generation(
                "LQR gain failed to stabilize the sampled system".into(),
            ));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut alpha = 1.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let r = radius(mid);
            if r > 1.0 {
                lo = mid;
            } else if r < 1.0 - MARGINAL_BAND {
                hi = mid;
                alpha = mid;
            } else {
                alpha = mid;
                break;
            }
        }
        Ok(DataGenPolicy {
            gain: lqr * alpha,
            noise_scale,
        })
    }

    /// Runs the policy for `steps` samples from `x0`.
    pub fn run(
        &self,
        system: &NetworkSystem,
        x0: &DVector<f64>,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<(Trajectory, DVector<f64>)> {
        let m = system.layout().m();
        let mut inputs = DMatrix::zeros(m, steps);
        let mut states = DMatrix::zeros(system.layout().n(), steps);
        let mut x = x0.clone();
        for t in 0..steps {
            let mut u = &self.gain * &x;
            for v in u.iter_mut() {
                *v += self.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            states.set_column(t, &x);
            inputs.set_column(t, &u);
            x = system.step(&x, &u)?;
        }
        Ok((
            Trajectory {
                inputs,
                states,
                consistent: true,
            },
            x,
        ))
    }
}

/// A recorded excitation experiment.
#[derive(Debug, Clone)]
pub struct DataRun {
    pub policy: DataGenPolicy,
    pub trajectory: Trajectory,
    pub final_state: DVector<f64>,
}

/// Records `length` samples under the marginally stabilizing excitation policy.
///
/// The initial state is standard normal; the same seed drives initial state and dither.
pub fn generate_data(system: &NetworkSystem, length: usize, noise_scale: f64, seed: u64) -> Result<DataRun> {
    let policy = DataGenPolicy::for_system(system, noise_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = DVector::from_fn(system.layout().n(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let (trajectory, final_state) = policy.run(system, &x0, length, &mut rng)?;
    Ok(DataRun {
        policy,
        trajectory,
        final_state,
    })
}

/// Infinite-horizon discrete LQR gain (`u = K x`) with identity weights, by
/// Riccati value iteration.
fn dlqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut gain = DMatrix::zeros(m, n);
    for _ in 0..20_000 {
        let bt_p = b.transpose() * &p;
        let s = DMatrix::<f64>::identity(m, m) + &bt_p * b;
        gain = s
            .lu()
            .solve(&(&bt_p * a))
            .ok_or_else(|| Error::Generation("singular Riccati step".into()))?;
        let closed = a - b * &gain;
        let mut next = DMatrix::<f64>::identity(n, n) + a.transpose() * &p * &closed;
        next = 0.5 * (&next + next.transpose());
        let delta = (&next - &p).norm();
        p = next;
        if delta <= 1e-12 * p.norm() {
            break;
        }
    }
    Ok(-gain)
}

/// Plant simulated from a known model. Only its stepping interface is
/// exposed to the controller.
#[derive(Debug, Clone)]
pub struct SimulatedPlant {
    system: NetworkSystem,
    state: DVector<f64>,
}

impl SimulatedPlant {
    pub fn new(system: NetworkSystem, state: DVector<f64>) -> Self {
        SimulatedPlant { system, state }
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }
}

impl Plant for SimulatedPlant {
    fn advance(&mut self, input: &DVector<f64>) -> DVector<f64> {
        self.state = self
            .system
            .step(&self.state, input)
            .expect("controller produced an input of the wrong dimension");
        self.state.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn scalar_layout(graph: Graph, actuated: &[usize]) -> SystemLayout {
        SystemLayout::uniform(graph, 1, actuated, 1).unwrap()
    }

    #[test]
    fn star_edges() {
        let g = build_graph(&GraphSpec::Star { nodes: 4 }, 0).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (0, 3)]);
        assert_eq!(g.neighbors(0), &[1, 2, 3]);
        assert_eq!(g.neighbors(2), &[0]);
    }

    #[test]
    fn nws_without_shortcuts_is_a_cycle() {
        let g = Graph::newman_watts_strogatz(6, 2, 0.0, 99).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 5), (1, 2), (2, 3), (3, 4), (4, 5)]);
    }

    #[test]
    fn nws_keeps_ring_and_is_seed_deterministic() {
        let g1 = Graph::newman_watts_strogatz(20, 4, 0.3, 7).unwrap();
        let g2 = Graph::newman_watts_strogatz(20, 4, 0.3, 7).unwrap();
        assert_eq!(g1, g2);
        for u in 0..20 {
            for j in 1..=2 {
                assert!(g1.has_edge(u, (u + j) % 20));
            }
        }
        assert!(g1.edge_count() >= 40);
        // 40 ring edges, each spawning at most one shortcut
        assert!(g1.edge_count() <= 80);
    }

    #[test]
    fn graph_parameter_errors() {
        assert!(Graph::newman_watts_strogatz(6, 6, 0.1, 0).is_err());
        assert!(Graph::newman_watts_strogatz(6, 3, 0.1, 0).is_err());
        assert!(Graph::newman_watts_strogatz(6, 2, 1.5, 0).is_err());
        assert!(Graph::newman_watts_strogatz(6, 2, -0.1, 0).is_err());
        assert!(Graph::star(1).is_err());
        assert!(Graph::from_edges(3, &[(0, 0)]).is_err());
        assert!(Graph::from_edges(3, &[(0, 3)]).is_err());
    }

    #[test]
    fn controllability_examples() {
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(is_controllable(&a, &b));

        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(!is_controllable(&a, &b));

        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(is_controllable(&a, &b));
    }

    #[test]
    fn step_examples() {
        let layout = scalar_layout(Graph::from_edges(1, &[]).unwrap(), &[0]);
        let sys = NetworkSystem::from_dense(
            layout,
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let next = sys
            .step(&DVector::from_element(1, 1.0), &DVector::from_element(1, -1.0))
            .unwrap();
        assert_eq!(next[0], 0.0);

        let layout = scalar_layout(Graph::from_edges(2, &[(0, 1)]).unwrap(), &[1]);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let sys = NetworkSystem::from_dense(layout, &a, &b).unwrap();
        assert!(sys.is_controllable());
        let next = sys
            .step(&DVector::from_vec(vec![1.0, 0.0]), &DVector::from_element(1, 1.0))
            .unwrap();
        assert_eq!(next, DVector::from_vec(vec![0.0, 1.0]));
        assert!(sys.step(&DVector::zeros(3), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn origin_is_equilibrium() {
        let g = Graph::newman_watts_strogatz(6, 2, 0.2, 1).unwrap();
        let sys = NetworkSystem::sample(scalar_layout(g, &[0, 3]), 5).unwrap();
        let next = sys.step(&DVector::zeros(6), &DVector::zeros(2)).unwrap();
        assert_eq!(next, DVector::zeros(6));
    }

    #[test]
    fn two_node_star_sample_is_coupled_and_controllable() {
        let sys = NetworkSystem::sample(scalar_layout(Graph::star(2).unwrap(), &[0]), 3).unwrap();
        let a = sys.a_matrix();
        assert!(a[(0, 1)] != 0.0 && a[(1, 0)] != 0.0);
        assert!(sys.is_controllable());
    }

    #[test]
    fn decoupled_integrators_are_diagonal() {
        let g = Graph::from_edges(3, &[]).unwrap();
        let sys = NetworkSystem::sample(scalar_layout(g, &[0, 1, 2]), 11).unwrap();
        let a = sys.a_matrix();
        let b = sys.b_matrix();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(a[(i, j)], 0.0);
                    assert_eq!(b[(i, j)], 0.0);
                }
            }
        }
        assert!(sys.is_controllable());
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let g = Graph::newman_watts_strogatz(8, 2, 0.3, 4).unwrap();
        let layout = SystemLayout::new(g, vec![1, 2, 1, 1, 2, 1, 1, 1], vec![1, 0, 0, 2, 0, 0, 1, 0]).unwrap();
        let s1 = NetworkSystem::sample(layout.clone(), 21).unwrap();
        let s2 = NetworkSystem::sample(layout, 21).unwrap();
        assert_eq!(s1, s2);
        assert!(linalg::spectral_radius(&s1.a_matrix()) <= 2.0 + 1e-9);
        assert!(s1.is_controllable());
    }

    #[test]
    fn uncontrollable_request_is_reported() {
        // Two decoupled nodes, only one actuated: never controllable.
        let g = Graph::from_edges(2, &[]).unwrap();
        let err = NetworkSystem::sample(scalar_layout(g, &[0]), 0).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn scalar_stable_system_gets_zero_gain() {
        let layout = scalar_layout(Graph::from_edges(1, &[]).unwrap(), &[0]);
        let sys = NetworkSystem::from_dense(
            layout,
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let policy = DataGenPolicy::for_system(&sys, 1.0).unwrap();
        assert_eq!(policy.gain[(0, 0)], 0.0);
    }

    #[test]
    fn unstable_system_is_brought_to_marginal_stability() {
        let g = Graph::star(5).unwrap();
        for seed in 0..5 {
            let sys = NetworkSystem::sample(scalar_layout(g.clone(), &[0, 2, 4]), seed).unwrap();
            let a = sys.a_matrix();
            let policy = DataGenPolicy::for_system(&sys, 1.0).unwrap();
            let closed = linalg::spectral_radius(&(&a + sys.b_matrix() * &policy.gain));
            if linalg::spectral_radius(&a) > 1.0 {
                assert!(
                    (1.0 - MARGINAL_BAND - 1e-12..=1.0 + 1e-12).contains(&closed),
                    "radius {closed}"
                );
            } else {
                assert_eq!(policy.gain.norm(), 0.0);
            }
        }
    }

    #[test]
    fn generated_data_is_deterministic_and_consistent() {
        let g = Graph::star(4).unwrap();
        let sys = NetworkSystem::sample(scalar_layout(g, &[0, 1]), 2).unwrap();
        let r1 = generate_data(&sys, 50, 1.0, 9).unwrap();
        let r2 = generate_data(&sys, 50, 1.0, 9).unwrap();
        assert_eq!(r1.trajectory, r2.trajectory);
        let traj = &r1.trajectory;
        for t in 0..49 {
            let next = sys
                .step(&traj.states.column(t).into_owned(), &traj.inputs.column(t).into_owned())
                .unwrap();
            assert_relative_eq!(next, traj.states.column(t + 1).into_owned(), epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn simulate_satisfies_dynamics(seed in 0u64..1000, len in 1usize..30) {
            let g = Graph::newman_watts_strogatz(6, 2, 0.3, seed).unwrap();
            let layout = SystemLayout::new(g, vec![1, 2, 1, 1, 1, 2], vec![1, 0, 1, 0, 0, 1]).unwrap();
            let sys = NetworkSystem::sample(layout, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let inputs = DMatrix::from_fn(3, len, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x0 = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (traj, last) = sys.simulate(&x0, &inputs).unwrap();
            let a = sys.a_matrix();
            let b = sys.b_matrix();
            for t in 0..len {
                let next = if t + 1 < len { traj.states.column(t + 1).into_owned() } else { last.clone() };
                let (x, u) = (traj.states.column(t).into_owned(), traj.inputs.column(t).into_owned());
                prop_assert_eq!(&sys.step(&x, &u).unwrap(), &next);
                let resid = (&a * &x + &b * &u - &next).norm();
                prop_assert!(resid < 1e-10 * (1.0 + next.norm()));
            }
        }

        #[test]
        fn step_respects_sparsity(seed in 0u64..1000, bump in -5.0f64..5.0) {
            let g = Graph::newman_watts_strogatz(7, 2, 0.2, seed).unwrap();
            let sys = NetworkSystem::sample(SystemLayout::uniform(g.clone(), 1, &[0, 3], 1).unwrap(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DVector::from_fn(7, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let base = sys.step(&x, &u).unwrap();
            for j in 0..7 {
                let mut xp = x.clone();
                xp[j] += bump;
                let pert = sys.step(&xp, &u).unwrap();
                for i in 0..7 {
                    if i != j && !g.has_edge(i, j) {
                        prop_assert_eq!(pert[i], base[i]);
                    }
                }
            }
        }
    }
}
