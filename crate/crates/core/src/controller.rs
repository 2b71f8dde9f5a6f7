//! Receding-horizon loop around the distributed solver.
//!
//! The plant is reached only through [`Plant::advance`]; everything the
//! controller knows about the dynamics comes from recorded data.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::data::{AgentDataView, HankelBlock};
use crate::error::{Error, Result};
use crate::network::{SystemLayout, Trajectory};
use crate::par::Execution;
use crate::problem::{
    assemble_prediction, build_problems, network_qp, DataBasis, GlobalCertificateData, Horizon, NodeProblem,
    NodeWeights, Prediction,
};
use crate::solver::{
    certificate_threshold_with, saddle_distance_bound, solve, CertificateRule, NetworkQp, SaddleState, SolverConfig,
};

/// Opaque stepping interface to the controlled system.
pub trait Plant {
    /// Applies `input` for one sample and returns the next state measurement.
    fn advance(&mut self, input: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub horizon: Horizon,
    /// Base tolerance `δ`.
    pub delta: f64,
    pub rule: CertificateRule,
    /// Use this residual threshold every step instead of the certificate.
    pub fixed_threshold: Option<f64>,
    /// Lower bound on the certificate threshold.
    pub threshold_floor: f64,
    /// Stop once `‖x‖` is at most this; `None` means `1e-6 ‖x(0)‖`.
    pub stop_tolerance: Option<f64>,
    pub max_steps: usize,
    pub warm_start: bool,
    pub basis: DataBasis,
    pub augmentation: f64,
    /// Euler step; `None` means `1 / (2‖M‖)`.
    pub step_size: Option<f64>,
    pub max_rounds: usize,
    pub execution: Execution,
}

impl ControllerConfig {
    pub fn new(horizon: Horizon, delta: f64) -> Self {
        ControllerConfig {
            horizon,
            delta,
            rule: CertificateRule::Corrected,
            fixed_threshold: None,
            threshold_floor: 1e-12,
            stop_tolerance: None,
            max_steps: 100,
            warm_start: true,
            basis: DataBasis::Orthonormal,
            augmentation: 0.3,
            step_size: None,
            max_rounds: 200_000,
            execution: Execution::Auto,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Parameter(format!("δ must be positive (got {})", self.delta)));
        }
        if let Some(eps) = self.stop_tolerance {
            if !(eps > 0.0) {
                return Err(Error::Parameter(format!("stop tolerance must be positive (got {eps})")));
            }
        }
        if let Some(rho) = self.fixed_threshold {
            if !(rho > 0.0) {
                return Err(Error::Parameter(format!(
                    "fixed threshold must be positive (got {rho})"
                )));
            }
        }
        if !(self.threshold_floor > 0.0) {
            return Err(Error::Parameter("threshold floor must be positive".into()));
        }
        Ok(())
    }
}

/// `δ · min(1, ‖x_last‖)`.
pub fn effective_tolerance(delta: f64, x_last: &DVector<f64>) -> f64 {
    delta * x_last.norm().min(1.0)
}

/// What happened at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// State `x(t)` before the input was applied.
    pub state: DVector<f64>,
    /// Initial window the step was solved from.
    pub window: Trajectory,
    /// Applied input `û(0)`.
    pub input: DVector<f64>,
    /// Predicted `u(0..T-1)`, stacked by sample.
    pub predicted_inputs: DVector<f64>,
    pub tolerance: f64,
    pub threshold: f64,
    /// Set when the threshold was raised to the floor.
    pub floored: bool,
    pub rounds: usize,
    /// `‖M†‖ √(Σ r_i²)` at the applied iterate.
    pub bound: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub records: Vec<StepRecord>,
    /// State after the last applied input.
    pub final_state: DVector<f64>,
    pub stop_tolerance: f64,
    /// Initial window the loop started from.
    pub initial_window: Trajectory,
}

impl ClosedLoopLog {
    /// `x(0), …, x(t_end)` including the final state.
    pub fn states(&self) -> Vec<DVector<f64>> {
        self.records
            .iter()
            .map(|r| r.state.clone())
            .chain(std::iter::once(self.final_state.clone()))
            .collect()
    }

    pub fn total_rounds(&self) -> usize {
        self.records.iter().map(|r| r.rounds).sum()
    }

    pub fn all_converged(&self) -> bool {
        self.records.iter().all(|r| r.converged)
    }

    pub fn reached_stop(&self) -> bool {
        self.final_state.norm() <= self.stop_tolerance
    }

    /// One row per step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let m = self.records.first().map_or(0, |r| r.input.len());
        let n = self.final_state.len();
        let mut header: Vec<String> = [
            "step",
            "state_norm",
            "tolerance",
            "threshold",
            "floored",
            "rounds",
            "bound",
            "converged",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..m).map(|k| format!("u_{k}")));
        header.extend((0..n).map(|k| format!("x_{k}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut rec = vec![
                r.step.to_string(),
                format!("{:e}", r.state.norm()),
                format!("{:e}", r.tolerance),
                format!("{:e}", r.threshold),
                r.floored.to_string(),
                r.rounds.to_string(),
                format!("{:e}", r.bound),
                r.converged.to_string(),
            ];
            rec.extend(r.input.iter().map(|v| format!("{v:e}")));
            rec.extend(r.state.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format `step, series, value` with one series per state component.
    pub fn write_states_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "series", "value"])?;
        for (t, x) in self.states().iter().enumerate() {
            for (k, v) in x.iter().enumerate() {
                w.write_record(&[t.to_string(), format!("x_{k}"), format!("{v:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of one distributed solve for the current window.
#[derive(Debug, Clone)]
pub struct StepSolution {
    pub prediction: Prediction,
    pub state: SaddleState,
    pub rounds: usize,
    pub converged: bool,
    pub bound: f64,
}

/// Agents' problems plus the offline certificate data.
#[derive(Debug, Clone)]
pub struct Controller {
    layout: SystemLayout,
    views: Vec<AgentDataView>,
    problems: Vec<NodeProblem>,
    qp: NetworkQp,
    norm: f64,
    pinv_norm: f64,
    config: ControllerConfig,
}

impl Controller {
    /// Builds the agents' problems and computes `‖M‖`, `‖M†‖` once; only the
    /// right-hand sides change afterwards.
    pub fn new(
        layout: SystemLayout,
        views: &[(AgentDataView, HankelBlock)],
        weights: &[NodeWeights],
        config: ControllerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.horizon;
        let zero = Trajectory {
            inputs: DMatrix::zeros(layout.m(), h.t_ini),
            states: DMatrix::zeros(layout.n(), h.t_ini),
            consistent: false,
        };
        let problems = build_problems(views, weights, h, config.basis, &zero)?;
        let qp = network_qp(&problems)?;
        let cert = GlobalCertificateData::assemble(&qp, config.augmentation);
        Ok(Controller {
            layout,
            views: views.iter().map(|(v, _)| v.clone()).collect(),
            problems,
            qp,
            norm: cert.norm,
            pinv_norm: cert.pinv_norm,
            config,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn problems(&self) -> &[NodeProblem] {
        &self.problems
    }

    pub fn qp(&self) -> &NetworkQp {
        &self.qp
    }

    /// `‖M‖` of the saddle system used by the flow.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// `‖M†‖` of the saddle system used by the flow.
    pub fn pinv_norm(&self) -> f64 {
        self.pinv_norm
    }

    pub fn step_size(&self) -> f64 {
        self.config
            .step_size
            .unwrap_or_else(|| SolverConfig::default_step(self.norm))
    }

    /// Refreshes every agent's right-hand side from its slice of `window`.
    pub fn set_window(&mut self, window: &Trajectory) -> Result<()> {
        for (i, view) in self.views.iter().enumerate() {
            let local = view.select_trajectory(window);
            self.problems[i].set_ini(&local)?;
            self.qp.set_rhs(i, self.problems[i].rhs().clone())?;
        }
        Ok(())
    }

    /// Residual threshold for tolerance `tol`, and whether the floor applied.
    pub fn threshold(&self, tol: f64) -> (f64, bool) {
        if let Some(rho) = self.config.fixed_threshold {
            return (rho, false);
        }
        let floor = self.config.threshold_floor;
        match certificate_threshold_with(self.config.rule, tol, self.qp.len(), self.pinv_norm) {
            Ok(rho) if rho >= floor => (rho, false),
            _ => (floor, true),
        }
    }

    /// Solves the current problem to residual threshold `threshold`.
    pub fn solve_current(&self, threshold: f64, initial: SaddleState) -> Result<StepSolution> {
        let mut cfg = SolverConfig::new(self.step_size(), threshold);
        cfg.max_rounds = self.config.max_rounds;
        cfg.augmentation = self.config.augmentation;
        cfg.execution = self.config.execution;
        let out = solve(&self.qp, &cfg, initial)?;
        let applied = out.best;
        Ok(StepSolution {
            prediction: assemble_prediction(&self.layout, &self.problems, &applied.z),
            bound: saddle_distance_bound(&applied.residuals, self.pinv_norm),
            rounds: out.rounds,
            converged: out.converged,
            state: applied,
        })
    }

    fn warm(&self, previous: &SaddleState) -> SaddleState {
        SaddleState {
            z: self
                .problems
                .iter()
                .zip(&previous.z)
                .map(|(p, z)| p.shift_primal(z))
                .collect(),
            lambda: previous.lambda.clone(),
            round: 0,
            residuals: Vec::new(),
        }
    }

    /// Runs the loop from `window` (the last `T_ini` samples) and the current
    /// measurement `current`.
    pub fn run(&mut self, plant: &mut dyn Plant, window: &Trajectory, current: &DVector<f64>) -> Result<ClosedLoopLog> {
        let h = self.config.horizon;
        if window.len() != h.t_ini
            || window.inputs.nrows() != self.layout.m()
            || window.states.nrows() != self.layout.n()
            || current.len() != self.layout.n()
        {
            return Err(Error::Layout(format!(
                "initial window must hold {} samples of the system signals",
                h.t_ini
            )));
        }
        let stop = self.config.stop_tolerance.unwrap_or(1e-6 * current.norm());
        let initial_window = window.clone();
        let mut window = window.clone();
        let mut x = current.clone();
        let mut records = Vec::new();
        let mut previous: Option<SaddleState> = None;
        for step in 0..self.config.max_steps {
            if x.norm() <= stop {
                break;
            }
            self.set_window(&window)?;
            let last = window.states.column(h.t_ini - 1).into_owned();
            let tol = effective_tolerance(self.config.delta, &last);
            let (threshold, floored) = self.threshold(tol);
            let initial = match (&previous, self.config.warm_start) {
                (Some(prev), true) => self.warm(prev),
                _ => SaddleState::zeros(&self.qp),
            };
            let sol = self.solve_current(threshold, initial)?;
            let u = sol.prediction.first_input();
            let next = plant.advance(&u);
            records.push(StepRecord {
                step,
                state: x.clone(),
                window: window.clone(),
                input: u.clone(),
                predicted_inputs: sol.prediction.cost_inputs(),
                tolerance: tol,
                threshold,
                floored,
                rounds: sol.rounds,
                bound: sol.bound,
                converged: sol.converged,
            });
            shift_window(&mut window, &u, &x);
            x = next;
            previous = Some(sol.state);
        }
        Ok(ClosedLoopLog {
            records,
            final_state: x,
            stop_tolerance: stop,
            initial_window,
        })
    }
}

/// Drops the oldest sample and appends `(u, x)`.
pub fn shift_window(window: &mut Trajectory, u: &DVector<f64>, x: &DVector<f64>) {
    let len = window.len();
    for t in 1..len {
        let (ui, xi) = (
            window.inputs.column(t).into_owned(),
            window.states.column(t).into_owned(),
        );
        window.inputs.set_column(t - 1, &ui);
        window.states.set_column(t - 1, &xi);
    }
    window.inputs.set_column(len - 1, u);
    window.states.set_column(len - 1, x);
}
