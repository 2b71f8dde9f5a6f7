//! Distributed primal-dual flow for separable equality-constrained QPs.
//!
//! Agent `i` owns a variable `z_i`, a cost `‖z_i‖²_{Q_i}` and constraints
//! `A_ii z_i + Σ_j A_ij z_j[S_j] = b_i`, where `S_j` is the range of `z_j`
//! that `j` shares with its neighbors. The flow on the Lagrangian
//! `Σ ‖z_i‖²_{Q_i} + λ'(A z - b) + (c/2)‖A z - b‖²` is
//!
//! ```text
//! λ̇_i = r_i = A_ii z_i + Σ_j A_ij z_j[S_j] - b_i
//! ż_i = -2 Q_i z_i - A_ii' μ_i - Σ_k (A_ki)' μ_k,    μ_k = λ_k + c r_k
//! ```
//!
//! With `c = 0` this is the plain saddle flow `ẏ = M y + q`. A round has two
//! message phases: shared blocks `z_j[S_j]` first, then the multipliers `μ_j`.

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Residual above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Coupling of an agent's constraints to a neighbor's shared block.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub neighbor: usize,
    /// `c_i × |S_j|` block multiplying `z_j[S_j]`.
    pub block: DMatrix<f64>,
}

/// One agent's share of the QP.
#[derive(Debug, Clone, PartialEq)]
pub struct QpNode {
    /// Diagonal cost blocks `(offset, Q)`; entries outside them cost nothing.
    pub cost: Vec<(usize, DMatrix<f64>)>,
    /// `c_i × dim(z_i)`.
    pub own: DMatrix<f64>,
    pub couplings: Vec<Coupling>,
    pub rhs: DVector<f64>,
    /// Range of `z_i` visible to neighbors.
    pub shared: Range<usize>,
}

impl QpNode {
    pub fn dim(&self) -> usize {
        self.own.ncols()
    }

    pub fn constraint_count(&self) -> usize {
        self.own.nrows()
    }

    /// `2 Q_i z_i`.
    pub fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(z.len());
        for (off, q) in &self.cost {
            let k = q.nrows();
            grad.rows_mut(*off, k).copy_from(&(q * z.rows(*off, k) * 2.0));
        }
        grad
    }

    /// `‖z_i‖²_{Q_i}`.
    pub fn cost_value(&self, z: &DVector<f64>) -> f64 {
        self.cost
            .iter()
            .map(|(off, q)| {
                let v = z.rows(*off, q.nrows());
                v.dot(&(q * v))
            })
            .sum()
    }
}

/// The agents' QPs plus the routing derived from their couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkQp {
    nodes: Vec<QpNode>,
    /// `incoming[i]` lists `(k, idx)` with `nodes[k].couplings[idx].neighbor == i`.
    incoming: Vec<Vec<(usize, usize)>>,
    /// Agents `i` exchanges messages with, ascending.
    peers: Vec<Vec<usize>>,
}

impl NetworkQp {
    pub fn new(nodes: Vec<QpNode>) -> Result<Self> {
        let count = nodes.len();
        let mut incoming = vec![Vec::new(); count];
        let mut peers = vec![Vec::new(); count];
        for (i, node) in nodes.iter().enumerate() {
            if node.rhs.len() != node.constraint_count() {
                return Err(Error::Layout(format!(
                    "agent {i}: rhs length differs from constraint count"
                )));
            }
            if node.shared.end > node.dim() {
                return Err(Error::Layout(format!("agent {i}: shared range exceeds its variable")));
            }
            for (off, q) in &node.cost {
                if !q.is_square() || off + q.nrows() > node.dim() {
                    return Err(Error::Layout(format!("agent {i}: cost block out of range")));
                }
            }
            for (idx, c) in node.couplings.iter().enumerate() {
                let j = c.neighbor;
                if j >= count || j == i {
                    return Err(Error::Layout(format!("agent {i}: invalid coupling target {j}")));
                }
                if c.block.nrows() != node.constraint_count() || c.block.ncols() != nodes[j].shared.len() {
                    return Err(Error::Layout(format!(
                        "agent {i}: coupling block to {j} has the wrong shape"
                    )));
                }
                incoming[j].push((i, idx));
                peers[i].push(j);
                peers[j].push(i);
            }
        }
        for p in &mut peers {
            p.sort_unstable();
            p.dedup();
        }
        Ok(NetworkQp { nodes, incoming, peers })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &QpNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[QpNode] {
        &self.nodes
    }

    pub fn peers(&self, i: usize) -> &[usize] {
        &self.peers[i]
    }

    /// Replaces agent `i`'s right-hand side.
    pub fn set_rhs(&mut self, i: usize, rhs: DVector<f64>) -> Result<()> {
        if rhs.len() != self.nodes[i].constraint_count() {
            return Err(Error::Layout(format!("agent {i}: rhs length mismatch")));
        }
        self.nodes[i].rhs = rhs;
        Ok(())
    }

    pub fn primal_dim(&self) -> usize {
        self.nodes.iter().map(QpNode::dim).sum()
    }

    pub fn dual_dim(&self) -> usize {
        self.nodes.iter().map(QpNode::constraint_count).sum()
    }

    pub fn primal_offsets(&self) -> Vec<usize> {
        offsets(self.nodes.iter().map(QpNode::dim))
    }

    pub fn dual_offsets(&self) -> Vec<usize> {
        offsets(self.nodes.iter().map(QpNode::constraint_count))
    }

    /// Dense block-diagonal cost matrix `Q`.
    pub fn dense_cost(&self) -> DMatrix<f64> {
        let n = self.primal_dim();
        let mut q = DMatrix::zeros(n, n);
        for (node, off) in self.nodes.iter().zip(self.primal_offsets()) {
            for (o, blk) in &node.cost {
                q.view_mut((off + o, off + o), blk.shape()).copy_from(blk);
            }
        }
        q
    }

    /// Dense stacked constraint matrix `A`, rows grouped by agent.
    pub fn dense_constraints(&self) -> DMatrix<f64> {
        let zoff = self.primal_offsets();
        let mut a = DMatrix::zeros(self.dual_dim(), self.primal_dim());
        for ((i, node), row) in self.nodes.iter().enumerate().zip(self.dual_offsets()) {
            a.view_mut((row, zoff[i]), node.own.shape()).copy_from(&node.own);
            for c in &node.couplings {
                let col = zoff[c.neighbor] + self.nodes[c.neighbor].shared.start;
                a.view_mut((row, col), c.block.shape()).copy_from(&c.block);
            }
        }
        a
    }

    pub fn dense_rhs(&self) -> DVector<f64> {
        let parts: Vec<f64> = self.nodes.iter().flat_map(|n| n.rhs.iter().copied()).collect();
        DVector::from_vec(parts)
    }

    /// Agent `i`'s constraint residual from its own variable and the shared
    /// blocks it received (`shared[j]` for each coupled `j`).
    pub fn constraint_residual(
        &self,
        i: usize,
        z: &DVector<f64>,
        shared: &[Option<&DVector<f64>>],
    ) -> Result<DVector<f64>> {
        let node = &self.nodes[i];
        let mut r = &node.own * z - &node.rhs;
        for c in &node.couplings {
            let zj = shared
                .get(c.neighbor)
                .copied()
                .flatten()
                .ok_or_else(|| missing(i, c.neighbor))?;
            r.gemv(1.0, &c.block, zj, 1.0);
        }
        Ok(r)
    }

    /// Agent `i`'s primal derivative from its multiplier and the
    /// multipliers it received from agents whose constraints touch `z_i`.
    pub fn primal_derivative(
        &self,
        i: usize,
        z: &DVector<f64>,
        mu: &DVector<f64>,
        duals: &[Option<&DVector<f64>>],
    ) -> Result<DVector<f64>> {
        let node = &self.nodes[i];
        let mut dz = -node.cost_gradient(z);
        dz.gemv_tr(-1.0, &node.own, mu, 1.0);
        let shared = node.shared.clone();
        for &(k, idx) in &self.incoming[i] {
            let mu_k = duals.get(k).copied().flatten().ok_or_else(|| missing(i, k))?;
            let block = &self.nodes[k].couplings[idx].block;
            let mut part = dz.rows_mut(shared.start, shared.len());
            part.gemv_tr(-1.0, block, mu_k, 1.0);
        }
        Ok(dz)
    }
}

fn missing(agent: usize, from: usize) -> Error {
    Error::Protocol(format!("agent {agent} has no message from neighbor {from} this round"))
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    dims.map(|d| {
        let o = acc;
        acc += d;
        o
    })
    .collect()
}

/// Primal and dual iterates of every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub z: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub round: usize,
    /// `‖col(ż_i, λ̇_i)‖` at the current iterate, empty until evaluated.
    pub residuals: Vec<f64>,
}

impl SaddleState {
    /// All-zero state (cold start).
    pub fn zeros(qp: &NetworkQp) -> Self {
        SaddleState {
            z: qp.nodes.iter().map(|n| DVector::zeros(n.dim())).collect(),
            lambda: qp.nodes.iter().map(|n| DVector::zeros(n.constraint_count())).collect(),
            round: 0,
            residuals: Vec::new(),
        }
    }

    /// `col(z_1, …, z_N, λ_1, …, λ_N)`.
    pub fn stack(&self) -> DVector<f64> {
        let all: Vec<f64> = self
            .z
            .iter()
            .chain(&self.lambda)
            .flat_map(|v| v.iter().copied())
            .collect();
        DVector::from_vec(all)
    }

    pub fn unstack(qp: &NetworkQp, y: &DVector<f64>) -> Result<Self> {
        if y.len() != qp.primal_dim() + qp.dual_dim() {
            return Err(Error::Dimension("stacked state has the wrong length".into()));
        }
        let mut at = 0;
        let mut take = |len: usize| {
            let v = y.rows(at, len).into_owned();
            at += len;
            v
        };
        let z = qp.nodes.iter().map(|n| take(n.dim())).collect();
        let lambda = qp.nodes.iter().map(|n| take(n.constraint_count())).collect();
        Ok(SaddleState {
            z,
            lambda,
            round: 0,
            residuals: Vec::new(),
        })
    }

    fn check(&self, qp: &NetworkQp) -> Result<()> {
        let ok = self.z.len() == qp.len()
            && self.lambda.len() == qp.len()
            && qp
                .nodes
                .iter()
                .enumerate()
                .all(|(i, n)| self.z[i].len() == n.dim() && self.lambda[i].len() == n.constraint_count());
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("saddle state does not match the QP layout".into()))
        }
    }
}

/// Per-agent time derivative of the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerivative {
    pub dz: Vec<DVector<f64>>,
    pub dlambda: Vec<DVector<f64>>,
}

impl FlowDerivative {
    pub fn residuals(&self) -> Vec<f64> {
        self.dz
            .iter()
            .zip(&self.dlambda)
            .map(|(a, b)| (a.norm_squared() + b.norm_squared()).sqrt())
            .collect()
    }
}

/// One delivered message, as recorded for locality audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageRecord {
    pub round: usize,
    pub sender: usize,
    pub recipient: usize,
    /// Length of the sender's shared primal block.
    pub shared_len: usize,
    /// Length of the sender's multiplier.
    pub dual_len: usize,
}

impl MessageRecord {
    pub fn payload_len(&self) -> usize {
        self.shared_len + self.dual_len
    }
}

/// Evaluates the flow at `state` with every agent using only its own data and
/// its peers' messages.
pub fn flow_derivative(
    qp: &NetworkQp,
    state: &SaddleState,
    augmentation: f64,
    exec: Execution,
) -> Result<FlowDerivative> {
    state.check(qp)?;
    let outbox: Vec<DVector<f64>> = qp
        .nodes
        .iter()
        .zip(&state.z)
        .map(|(n, z)| z.rows(n.shared.start, n.shared.len()).into_owned())
        .collect();
    let residuals = par::map_indexed(exec, qp.len(), |i| {
        let inbox = inbox_for(qp, i, &outbox);
        qp.constraint_residual(i, &state.z[i], &inbox)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mu: Vec<DVector<f64>> = if augmentation == 0.0 {
        state.lambda.clone()
    } else {
        state
            .lambda
            .iter()
            .zip(&residuals)
            .map(|(l, r)| l + r * augmentation)
            .collect()
    };
    let dz = par::map_indexed(exec, qp.len(), |i| {
        let inbox = inbox_for(qp, i, &mu);
        qp.primal_derivative(i, &state.z[i], &mu[i], &inbox)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(FlowDerivative { dz, dlambda: residuals })
}

fn inbox_for<'a>(qp: &NetworkQp, i: usize, outbox: &'a [DVector<f64>]) -> Vec<Option<&'a DVector<f64>>> {
    let mut inbox = vec![None; qp.len()];
    for &j in &qp.peers[i] {
        inbox[j] = Some(&outbox[j]);
    }
    inbox
}

/// Settings for [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Euler step `h`.
    pub step_size: f64,
    /// Stop once every agent's residual is below this.
    pub threshold: f64,
    pub max_rounds: usize,
    /// Augmentation weight `c`; zero gives the plain flow.
    pub augmentation: f64,
    pub execution: Execution,
    pub record_messages: bool,
    /// Record a trace row every this many rounds (and at the last round).
    pub trace_every: Option<usize>,
}

impl SolverConfig {
    pub fn new(step_size: f64, threshold: f64) -> Self {
        SolverConfig {
            step_size,
            threshold,
            max_rounds: 200_000,
            augmentation: 0.0,
            execution: Execution::Auto,
            record_messages: false,
            trace_every: None,
        }
    }

    /// Default step `1 / (2‖M‖)` for a system matrix of spectral norm `norm`.
    pub fn default_step(norm: f64) -> f64 {
        0.5 / norm
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Parameter(format!(
                "step size must be positive (got {})",
                self.step_size
            )));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Parameter(format!(
                "residual threshold must be positive (got {})",
                self.threshold
            )));
        }
        if !(self.augmentation >= 0.0 && self.augmentation.is_finite()) {
            return Err(Error::Parameter(format!(
                "augmentation must be non-negative (got {})",
                self.augmentation
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::Parameter("max rounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    /// Final iterate (the converged one on success).
    pub state: SaddleState,
    /// Iterate with the smallest `Σ r_i²` seen; equals `state` on success.
    pub best: SaddleState,
    /// Derivative evaluations performed.
    pub rounds: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
    pub messages: Vec<MessageRecord>,
}

/// Runs synchronous rounds until every residual is below the threshold or the
/// round budget is spent.
///
/// Each round evaluates the derivative; if all agents are below the threshold
/// the run stops, otherwise every agent takes an Euler step.
pub fn solve(qp: &NetworkQp, config: &SolverConfig, initial: SaddleState) -> Result<SolveOutcome> {
    config.validate()?;
    initial.check(qp)?;
    let mut state = initial;
    let mut best: Option<(f64, SaddleState)> = None;
    let mut trace = Vec::new();
    let mut messages = Vec::new();
    let h = config.step_size;
    for round in 1..=config.max_rounds {
        let d = flow_derivative(qp, &state, config.augmentation, config.execution)?;
        state.residuals = d.residuals();
        state.round = round;
        if config.record_messages {
            for i in 0..qp.len() {
                for &j in &qp.peers[i] {
                    messages.push(MessageRecord {
                        round,
                        sender: i,
                        recipient: j,
                        shared_len: qp.nodes[i].shared.len(),
                        dual_len: qp.nodes[i].constraint_count(),
                    });
                }
            }
        }
        let worst = state.residuals.iter().copied().fold(0.0, f64::max);
        if !worst.is_finite() || worst > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                round,
                residual: worst,
                step_size: h,
            });
        }
        let converged = state.residuals.iter().all(|&r| r < config.threshold);
        let last = converged || round == config.max_rounds;
        if let Some(every) = config.trace_every {
            if round % every.max(1) == 0 || last {
                trace.push(TraceRow {
                    round,
                    residuals: state.residuals.clone(),
                });
            }
        }
        if converged {
            return Ok(SolveOutcome {
                best: state.clone(),
                state,
                rounds: round,
                converged: true,
                trace,
                messages,
            });
        }
        let score: f64 = state.residuals.iter().map(|r| r * r).sum();
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, state.clone()));
        }
        if round == config.max_rounds {
            break;
        }
        let exec = config.execution;
        let mut pairs: Vec<_> = state.z.iter_mut().zip(state.lambda.iter_mut()).collect();
        par::for_each_mut(exec, &mut pairs, |i, (z, l)| {
            z.axpy(h, &d.dz[i], 1.0);
            l.axpy(h, &d.dlambda[i], 1.0);
        });
    }
    let (_, best) = best.expect("at least one round ran");
    Ok(SolveOutcome {
        state,
        best,
        rounds: config.max_rounds,
        converged: false,
        trace,
        messages,
    })
}

/// Dense saddle system `ẏ = M_c y + q_c` of the (augmented) flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSystem {
    pub m: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl SaddleSystem {
    /// `M_c = [[-2Q - c A'A, -A'], [A, 0]]`, `q_c = col(c A'b, -b)`.
    pub fn assemble(qp: &NetworkQp, augmentation: f64) -> Self {
        let q = qp.dense_cost();
        let a = qp.dense_constraints();
        let b = qp.dense_rhs();
        let (np, nd) = (qp.primal_dim(), qp.dual_dim());
        let mut m = DMatrix::zeros(np + nd, np + nd);
        let mut top = -2.0 * q;
        if augmentation != 0.0 {
            top -= augmentation * a.tr_mul(&a);
        }
        m.view_mut((0, 0), (np, np)).copy_from(&top);
        m.view_mut((0, np), (np, nd)).copy_from(&(-a.transpose()));
        m.view_mut((np, 0), (nd, np)).copy_from(&a);
        let mut rhs = DVector::zeros(np + nd);
        if augmentation != 0.0 {
            rhs.rows_mut(0, np).copy_from(&(a.tr_mul(&b) * augmentation));
        }
        rhs.rows_mut(np, nd).copy_from(&(-b));
        SaddleSystem { m, q: rhs }
    }

    pub fn derivative(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.m * y + &self.q
    }

    /// One centralized Euler step `y ← y + h (M y + q)`.
    pub fn euler_step(&self, y: &DVector<f64>, h: f64) -> DVector<f64> {
        y + self.derivative(y) * h
    }
}

/// How the residual threshold is derived from the tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CertificateRule {
    /// `ρ = δ / (√N ‖M†‖)`; stopping below it guarantees `‖u - u*‖ < δ`.
    #[default]
    Corrected,
    /// `ρ = δ² / (N ‖M†‖²)`, kept for comparison runs.
    Printed,
}

/// Residual threshold that certifies `‖u - u*‖ < delta`.
pub fn certificate_threshold(delta: f64, agents: usize, pinv_norm: f64) -> Result<f64> {
    certificate_threshold_with(CertificateRule::Corrected, delta, agents, pinv_norm)
}

pub fn certificate_threshold_with(rule: CertificateRule, delta: f64, agents: usize, pinv_norm: f64) -> Result<f64> {
    if !(delta > 0.0) || agents == 0 || !(pinv_norm > 0.0) {
        return Err(Error::Parameter(format!(
            "certificate needs δ > 0, N > 0 and ‖M†‖ > 0 (got {delta}, {agents}, {pinv_norm})"
        )));
    }
    let n = agents as f64;
    Ok(match rule {
        CertificateRule::Corrected => delta / (n.sqrt() * pinv_norm),
        CertificateRule::Printed => delta * delta / (n * pinv_norm * pinv_norm),
    })
}

/// `‖M†‖ · √(Σ r_i²)`, an upper bound on the distance to the saddle set.
pub fn saddle_distance_bound(residuals: &[f64], pinv_norm: f64) -> f64 {
    pinv_norm * residuals.iter().map(|r| r * r).sum::<f64>().sqrt()
}

pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRow], pinv_norm: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let agents = trace.first().map_or(0, |r| r.residuals.len());
    let mut header = vec!["round".to_string()];
    header.extend((0..agents).map(|i| format!("residual_{i}")));
    header.push("bound".into());
    w.write_record(&header)?;
    for row in trace {
        let mut rec = vec![row.round.to_string()];
        rec.extend(row.residuals.iter().map(|r| format!("{r:e}")));
        rec.push(format!("{:e}", saddle_distance_bound(&row.residuals, pinv_norm)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_message_log_csv<W: Write>(out: W, log: &[MessageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "sender", "recipient", "shared_len", "dual_len"])?;
    for m in log {
        w.write_record(&[
            m.round.to_string(),
            m.sender.to_string(),
            m.recipient.to_string(),
            m.shared_len.to_string(),
            m.dual_len.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// minimize z² subject to z = 1
    fn toy() -> NetworkQp {
        NetworkQp::new(vec![QpNode {
            cost: vec![(0, DMatrix::from_element(1, 1, 1.0))],
            own: DMatrix::from_element(1, 1, 1.0),
            couplings: vec![],
            rhs: DVector::from_element(1, 1.0),
            shared: 0..0,
        }])
        .unwrap()
    }

    fn state(z: f64, l: f64) -> SaddleState {
        SaddleState {
            z: vec![DVector::from_element(1, z)],
            lambda: vec![DVector::from_element(1, l)],
            round: 0,
            residuals: vec![],
        }
    }

    /// Random path of agents, each sharing its trailing `share` entries.
    fn random_chain(count: usize, seed: u64) -> NetworkQp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (dim, rows, share) = (5, 3, 2);
        let nodes = (0..count)
            .map(|i| {
                let mut couplings = vec![];
                if i > 0 {
                    couplings.push(Coupling {
                        neighbor: i - 1,
                        block: normal(rows, share),
                    });
                }
                if i + 1 < count {
                    couplings.push(Coupling {
                        neighbor: i + 1,
                        block: normal(rows, share),
                    });
                }
                let c = normal(dim, dim);
                QpNode {
                    cost: vec![(0, c.tr_mul(&c) * 0.1)],
                    own: normal(rows, dim),
                    couplings,
                    rhs: normal(rows, 1).column(0).into_owned(),
                    shared: dim - share..dim,
                }
            })
            .collect();
        NetworkQp::new(nodes).unwrap()
    }

    #[test]
    fn toy_derivative_and_equilibrium() {
        let qp = toy();
        let d = flow_derivative(&qp, &state(0.3, 0.5), 0.0, Execution::Sequential).unwrap();
        assert_relative_eq!(d.dz[0][0], -2.0 * 0.3 - 0.5);
        assert_relative_eq!(d.dlambda[0][0], 0.3 - 1.0);
        let d = flow_derivative(&qp, &state(1.0, -2.0), 0.0, Execution::Sequential).unwrap();
        assert_eq!(d.residuals(), vec![0.0]);
    }

    #[test]
    fn toy_converges_from_origin() {
        let qp = toy();
        let cfg = SolverConfig::new(0.1, 1e-9);
        let out = solve(&qp, &cfg, state(0.0, 0.0)).unwrap();
        assert!(out.converged);
        assert!((out.state.z[0][0] - 1.0).abs() < 1e-6);
        assert!((out.state.lambda[0][0] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn start_at_saddle_takes_one_round() {
        let out = solve(&toy(), &SolverConfig::new(0.1, 1e-9), state(1.0, -2.0)).unwrap();
        assert!(out.converged);
        assert_eq!(out.rounds, 1);
        assert_eq!(out.state.residuals, vec![0.0]);
    }

    #[test]
    fn toy_system_matrix_and_bound() {
        let qp = toy();
        let sys = SaddleSystem::assemble(&qp, 0.0);
        assert_eq!(sys.m, DMatrix::from_row_slice(2, 2, &[-2.0, -1.0, 1.0, 0.0]));
        let y = DVector::zeros(2);
        assert_eq!(sys.derivative(&y), DVector::from_vec(vec![0.0, -1.0]));
        let pinv = linalg::pinv_norm(&sys.m);
        let sv = linalg::singular_values(&sys.m);
        assert_relative_eq!(pinv, 1.0 / sv[1], epsilon = 1e-12);
        let d = flow_derivative(&qp, &state(0.0, 0.0), 0.0, Execution::Sequential).unwrap();
        assert_relative_eq!(saddle_distance_bound(&d.residuals(), pinv), pinv);
    }

    #[test]
    fn divergence_names_step_size() {
        let err = solve(&toy(), &SolverConfig::new(5.0, 1e-9), state(0.0, 0.0)).unwrap_err();
        match err {
            Error::Divergence { step_size, .. } => assert_eq!(step_size, 5.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_message_is_a_protocol_error() {
        let qp = random_chain(3, 1);
        let z = DVector::zeros(5);
        let err = qp.constraint_residual(1, &z, &[None, None, None]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn local_derivative_matches_centralized() {
        for seed in 0..5 {
            let qp = random_chain(3, seed);
            for c in [0.0, 0.7] {
                let sys = SaddleSystem::assemble(&qp, c);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let y = DVector::from_fn(sys.q.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let s = SaddleState::unstack(&qp, &y).unwrap();
                let d = flow_derivative(&qp, &s, c, Execution::Sequential).unwrap();
                let stacked = SaddleState {
                    z: d.dz,
                    lambda: d.dlambda,
                    round: 0,
                    residuals: vec![],
                }
                .stack();
                let central = sys.derivative(&y);
                assert!((stacked - central).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn augmentation_keeps_the_saddle_point() {
        let qp = random_chain(4, 9);
        let plain = SaddleSystem::assemble(&qp, 0.0);
        let aug = SaddleSystem::assemble(&qp, 0.5);
        let y = linalg::lstsq_min_norm(&plain.m, &(-&plain.q));
        assert!(plain.derivative(&y).amax() < 1e-9);
        assert!(aug.derivative(&y).amax() < 1e-9);
    }

    #[test]
    fn sequential_and_parallel_rounds_are_identical() {
        let qp = random_chain(5, 3);
        let mut cfg = SolverConfig::new(0.01, 1e-30);
        cfg.max_rounds = 200;
        cfg.augmentation = 0.3;
        cfg.execution = Execution::Sequential;
        let a = solve(&qp, &cfg, SaddleState::zeros(&qp)).unwrap();
        cfg.execution = Execution::Parallel;
        let b = solve(&qp, &cfg, SaddleState::zeros(&qp)).unwrap();
        assert_eq!(a.state, b.state);
        assert!(!a.converged);
    }

    #[test]
    fn certificate_examples() {
        assert_relative_eq!(certificate_threshold(0.1, 4, 5.0).unwrap(), 0.01, epsilon = 1e-15);
        assert_relative_eq!(certificate_threshold(0.3, 1, 1.0).unwrap(), 0.3);
        assert_relative_eq!(
            certificate_threshold_with(CertificateRule::Printed, 0.1, 4, 5.0).unwrap(),
            0.01 / 100.0,
            epsilon = 1e-18
        );
        assert!(certificate_threshold(0.0, 4, 5.0).is_err());
        assert!(certificate_threshold(0.1, 0, 5.0).is_err());
        assert!(certificate_threshold(0.1, 4, 0.0).is_err());
        assert_eq!(saddle_distance_bound(&[0.0, 0.0], 3.0), 0.0);
    }

    #[test]
    fn message_log_is_neighbor_only() {
        let qp = random_chain(4, 2);
        let mut cfg = SolverConfig::new(0.01, 1e-30);
        cfg.max_rounds = 3;
        cfg.record_messages = true;
        let out = solve(&qp, &cfg, SaddleState::zeros(&qp)).unwrap();
        assert_eq!(out.messages.len(), 3 * 6);
        for m in &out.messages {
            assert_eq!(m.sender.abs_diff(m.recipient), 1);
            assert_eq!(m.payload_len(), 2 + 3);
        }
        let mut buf = Vec::new();
        write_message_log_csv(&mut buf, &out.messages).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 19);
    }
}
