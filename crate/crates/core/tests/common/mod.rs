#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ddpc::data::{build_agent_views, AgentDataView, HankelBlock};
use ddpc::network::{generate_data, Graph, NetworkSystem, SystemLayout, Trajectory};
use ddpc::problem::{identity_weights, Horizon, NodeWeights};

pub struct Setup {
    pub system: NetworkSystem,
    pub horizon: Horizon,
    pub views: Vec<(AgentDataView, HankelBlock)>,
    pub weights: Vec<NodeWeights>,
}

impl Setup {
    pub fn layout(&self) -> &SystemLayout {
        self.system.layout()
    }

    /// Trailing `T_ini` samples of a random trajectory and the state after them.
    pub fn window(&self, seed: u64) -> (Trajectory, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (self.layout().n(), self.layout().m());
        let len = self.horizon.t_ini + 2;
        let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = DMatrix::from_fn(m, len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (traj, next) = self.system.simulate(&x0, &u).unwrap();
        (traj.window(len - self.horizon.t_ini, self.horizon.t_ini), next)
    }
}

/// Scalar star with every node actuated and data at the length bound plus a margin.
pub fn star(nodes: usize, t: usize, seed: u64) -> Setup {
    let graph = Graph::star(nodes).unwrap();
    let actuated: Vec<usize> = (0..nodes).collect();
    let layout = SystemLayout::uniform(graph, 1, &actuated, 1).unwrap();
    from_layout(layout, t, seed)
}

pub fn from_layout(layout: SystemLayout, t: usize, seed: u64) -> Setup {
    with_horizon(layout, Horizon::new(1, t).unwrap(), seed)
}

pub fn with_horizon(layout: SystemLayout, horizon: Horizon, seed: u64) -> Setup {
    let system = NetworkSystem::sample(layout.clone(), seed).unwrap();
    let len = horizon.min_data_length(layout.n(), layout.m()) + 20;
    let run = generate_data(&system, len, 1.0, seed + 1).unwrap();
    let views = build_agent_views(&run.trajectory, &layout, horizon.depth()).unwrap();
    Setup {
        weights: identity_weights(&layout),
        system,
        horizon,
        views,
    }
}
