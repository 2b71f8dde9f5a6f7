mod common;

use nalgebra::{DMatrix, DVector};

use ddpc::controller::{Controller, ControllerConfig, Plant};
use ddpc::data::build_agent_views;
use ddpc::network::{Graph, NetworkSystem, SimulatedPlant, SystemLayout, Trajectory};
use ddpc::problem::{build_problems, identity_weights, DataBasis, Horizon};

/// Records every applied input so the log can be replayed.
struct Recording {
    inner: SimulatedPlant,
    inputs: Vec<DVector<f64>>,
}

impl Plant for Recording {
    fn advance(&mut self, input: &DVector<f64>) -> DVector<f64> {
        self.inputs.push(input.clone());
        self.inner.advance(input)
    }
}

fn run_star(seed: u64) -> (common::Setup, ddpc::controller::ClosedLoopLog, Vec<DVector<f64>>) {
    let s = common::star(4, 3, seed);
    let (window, x0) = s.window(seed + 50);
    let mut cfg = ControllerConfig::new(s.horizon, 1e-2);
    cfg.max_steps = 40;
    cfg.stop_tolerance = Some(1e-3 * x0.norm());
    let mut ctrl = Controller::new(s.layout().clone(), &s.views, &s.weights, cfg).unwrap();
    let mut plant = Recording {
        inner: SimulatedPlant::new(s.system.clone(), x0.clone()),
        inputs: vec![],
    };
    let log = ctrl.run(&mut plant, &window, &x0).unwrap();
    (s, log, plant.inputs)
}

#[test]
fn star_loop_is_consistent_with_the_plant() {
    let (s, log, applied) = run_star(3);
    assert!(log.reached_stop(), "final ‖x‖ = {:e}", log.final_state.norm());
    assert_eq!(applied.len(), log.records.len());
    let states = log.states();
    for (k, rec) in log.records.iter().enumerate() {
        assert_eq!(rec.step, k);
        assert_eq!(rec.input, applied[k]);
        assert_eq!(s.system.step(&states[k], &rec.input).unwrap(), states[k + 1]);
        assert!(rec.threshold > 0.0);
        assert_eq!(rec.predicted_inputs.len(), s.layout().m() * s.horizon.t);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let (_, a, _) = run_star(5);
    let (_, b, _) = run_star(5);
    assert_eq!(a, b);
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.write_csv(&mut csv_a).unwrap();
    b.write_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn integrator_chain_is_regulated() {
    // two coupled scalar integrators, both actuated
    let layout = SystemLayout::uniform(Graph::from_edges(2, &[(0, 1)]).unwrap(), 1, &[0, 1], 1).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
    let b = DMatrix::identity(2, 2);
    let system = NetworkSystem::from_dense(layout.clone(), &a, &b).unwrap();
    let horizon = Horizon::new(1, 2).unwrap();
    let run = ddpc::network::generate_data(&system, 40, 1.0, 9).unwrap();
    let views = build_agent_views(&run.trajectory, &layout, horizon.depth()).unwrap();
    let weights = identity_weights(&layout);
    let mut cfg = ControllerConfig::new(horizon, 1e-3);
    cfg.max_steps = 20;
    let mut ctrl = Controller::new(layout, &views, &weights, cfg).unwrap();
    let window = Trajectory {
        inputs: DMatrix::zeros(2, 1),
        states: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
        consistent: true,
    };
    let x0 = system
        .step(&window.states.column(0).into_owned(), &DVector::zeros(2))
        .unwrap();
    let mut plant = SimulatedPlant::new(system, x0.clone());
    let log = ctrl.run(&mut plant, &window, &x0).unwrap();
    assert!(log.reached_stop(), "final ‖x‖ = {:e}", log.final_state.norm());
    assert!(log.records.len() < 20);
}

#[test]
fn ini_update_matches_rebuild() {
    let s = common::star(5, 3, 11);
    let (w1, _) = s.window(1);
    let (w2, _) = s.window(2);
    for basis in [DataBasis::Hankel, DataBasis::Orthonormal] {
        let first = build_problems(&s.views, &s.weights, s.horizon, basis, &w1).unwrap();
        let rebuilt = build_problems(&s.views, &s.weights, s.horizon, basis, &w2).unwrap();
        for (i, (p, (view, _))) in first.iter().zip(&s.views).enumerate() {
            let updated = p.update_ini(&view.select_trajectory(&w2)).unwrap();
            assert_eq!(updated, rebuilt[i]);
        }
    }
}

#[test]
fn window_of_wrong_length_is_rejected() {
    let s = common::star(3, 3, 1);
    let (window, x0) = s.window(0);
    let mut ctrl = Controller::new(
        s.layout().clone(),
        &s.views,
        &s.weights,
        ControllerConfig::new(s.horizon, 0.1),
    )
    .unwrap();
    let mut plant = SimulatedPlant::new(s.system.clone(), x0.clone());
    let long = Trajectory {
        inputs: DMatrix::zeros(window.inputs.nrows(), 2),
        states: DMatrix::zeros(window.states.nrows(), 2),
        consistent: false,
    };
    assert!(ctrl.run(&mut plant, &long, &x0).is_err());
}

#[test]
fn every_step_starts_from_the_trailing_logged_samples() {
    let graph = Graph::star(3).unwrap();
    let layout = SystemLayout::uniform(graph, 1, &[0, 1, 2], 1).unwrap();
    let s = common::with_horizon(layout, Horizon::new(2, 3).unwrap(), 21);
    let (window, x0) = s.window(4);
    let mut cfg = ControllerConfig::new(s.horizon, 1e-2);
    cfg.max_steps = 15;
    let mut ctrl = Controller::new(s.layout().clone(), &s.views, &s.weights, cfg).unwrap();
    let mut plant = SimulatedPlant::new(s.system.clone(), x0.clone());
    let log = ctrl.run(&mut plant, &window, &x0).unwrap();
    assert_eq!(log.initial_window, window);
    let t_ini = s.horizon.t_ini;
    for (k, rec) in log.records.iter().enumerate() {
        assert_eq!(rec.window.len(), t_ini);
        for j in 0..t_ini {
            let (u, x) = match (k + j).checked_sub(t_ini) {
                Some(idx) => (log.records[idx].input.clone(), log.records[idx].state.clone()),
                None => {
                    let col = k + j;
                    (
                        window.inputs.column(col).into_owned(),
                        window.states.column(col).into_owned(),
                    )
                }
            };
            assert_eq!(rec.window.inputs.column(j), u.column(0), "step {k} sample {j}");
            assert_eq!(rec.window.states.column(j), x.column(0), "step {k} sample {j}");
        }
    }
}
