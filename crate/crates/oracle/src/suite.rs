//! Seeded random instances for equivalence and soundness checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ddpc::data::{build_agent_views, check_condition_i, AgentDataView, HankelBlock};
use ddpc::linalg;
use ddpc::network::{generate_data, Graph, NetworkSystem, SystemLayout, Trajectory};
use ddpc::problem::{identity_weights, Horizon, NodeWeights};

/// A random controllable network with excitation data satisfying the global
/// identifiability condition.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub system: NetworkSystem,
    pub horizon: Horizon,
    pub data: Trajectory,
    pub views: Vec<(AgentDataView, HankelBlock)>,
    pub weights: Vec<NodeWeights>,
}

impl Instance {
    pub fn layout(&self) -> &SystemLayout {
        self.system.layout()
    }

    /// A reachable initial window: the last `T_ini` samples of a random
    /// trajectory, plus the state that follows it.
    pub fn random_window(&self, seed: u64) -> (Trajectory, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = self.layout();
        let len = self.horizon.t_ini + 3;
        let x0 = DVector::from_fn(layout.n(), |_, _| normal(&mut rng));
        let u = DMatrix::from_fn(layout.m(), len, |_, _| normal(&mut rng));
        let (traj, next) = self.system.simulate(&x0, &u).expect("dimensions match");
        (traj.window(len - self.horizon.t_ini, self.horizon.t_ini), next)
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Settings for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct SuiteSpec {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub max_state: usize,
    pub t_ini: usize,
    /// Extra samples beyond the minimum length for input excitation.
    pub data_margin: usize,
    /// Smallest accepted `σ_min / σ_max` of the controllability matrix.
    pub min_controllability: f64,
    /// Probability that a node carries an input.
    pub actuation_prob: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            min_nodes: 2,
            max_nodes: 6,
            max_state: 8,
            t_ini: 1,
            data_margin: 10,
            min_controllability: 1e-4,
            actuation_prob: 0.5,
        }
    }
}

/// Draws instance `seed`: `N` nodes with 1 or 2 states each (total at most
/// `max_state`), a random non-empty actuated set, horizon `T ∈ {n, n + 2}`.
/// Draws that are not controllable are replaced by the next sub-seed.
pub fn random_instance(spec: SuiteSpec, seed: u64) -> Instance {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let nodes = rng.gen_range(spec.min_nodes..=spec.max_nodes);
        let graph = match nodes {
            2 => Graph::from_edges(2, &[(0, 1)]).expect("valid edge"),
            _ if rng.gen_bool(0.5) => Graph::star(nodes).expect("valid star"),
            _ => Graph::newman_watts_strogatz(nodes, 2, 0.3, rng.gen()).expect("valid ring"),
        };
        let mut dims = vec![1; nodes];
        let mut total = nodes;
        for d in dims.iter_mut() {
            if total < spec.max_state && rng.gen_bool(0.4) {
                *d = 2;
                total += 1;
            }
        }
        let mut inputs: Vec<usize> = (0..nodes)
            .map(|_| usize::from(rng.gen_bool(spec.actuation_prob)))
            .collect();
        if inputs.iter().all(|&m| m == 0) {
            inputs[rng.gen_range(0..nodes)] = 1;
        }
        let Ok(layout) = SystemLayout::new(graph, dims, inputs) else {
            continue;
        };
        let Ok(system) = NetworkSystem::sample(layout.clone(), rng.gen()) else {
            continue;
        };
        if controllability_ratio(&system) < spec.min_controllability {
            continue;
        }
        let (n, m) = (layout.n(), layout.m());
        let t = if rng.gen_bool(0.5) { n } else { n + 2 };
        let horizon = Horizon::new(spec.t_ini, t).expect("positive horizon");
        let needed = (m + 1) * (n + horizon.depth()) - 1;
        let length = needed.max(horizon.min_data_length(n, m)) + spec.data_margin;
        let Ok(run) = generate_data(&system, length, 1.0, rng.gen()) else {
            continue;
        };
        if !check_condition_i(&run.trajectory.inputs, n, horizon.depth()).passed {
            continue;
        }
        let views = build_agent_views(&run.trajectory, &layout, horizon.depth()).expect("depth fits");
        return Instance {
            seed,
            weights: identity_weights(&layout),
            system,
            horizon,
            data: run.trajectory,
            views,
        };
    }
    unreachable!()
}

/// `σ_min / σ_max` of `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_ratio(system: &NetworkSystem) -> f64 {
    let a = system.a_matrix();
    let b = system.b_matrix();
    let (n, m) = (a.nrows(), b.ncols());
    let mut c = DMatrix::zeros(n, n * m);
    let mut p = b;
    for k in 0..n {
        c.view_mut((0, k * m), (n, m)).copy_from(&p);
        p = &a * p;
    }
    let s = linalg::singular_values(&c);
    if s.is_empty() || s[0] == 0.0 {
        return 0.0;
    }
    s[s.len() - 1] / s[0]
}
