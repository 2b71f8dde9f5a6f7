//! generate → excite → check PE → control.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ddpc::controller::{ClosedLoopLog, Controller};
use ddpc::data::{build_agent_views, check_condition_i, check_condition_ii, AgentDataView, HankelBlock, PeOutcome};
use ddpc::network::{generate_data, DataRun, NetworkSystem, SimulatedPlant, SystemLayout, Trajectory};
use ddpc::problem::{Horizon, NodeWeights};
use ddpc_oracle::{compare_to_exact_mpc, global_weights, solve_lqr_kkt, MpcComparison};

use crate::scenario::{Cell, Identifiability, Scenario};
use crate::CliError;

/// Both identifiability tests on the recorded data.
#[derive(Debug, Clone, PartialEq)]
pub struct PeReport {
    pub global: PeOutcome,
    pub local: Vec<PeOutcome>,
}

impl PeReport {
    pub fn local_passed(&self) -> bool {
        self.local.iter().all(|o| o.passed)
    }

    pub fn failing_nodes(&self) -> Vec<usize> {
        (0..self.local.len()).filter(|&i| !self.local[i].passed).collect()
    }

    /// Errors naming the failed condition (and node) if `required` does not hold.
    pub fn require(&self, required: Identifiability) -> Result<(), CliError> {
        let global = || {
            let g = &self.global;
            format!(
                "condition (i): inputs are not persistently exciting of order {} (rank {} of {}, length {})",
                g.order,
                g.rank.map_or("n/a".to_string(), |r| r.to_string()),
                g.required_rank(),
                g.length
            )
        };
        let local = || {
            let i = self.failing_nodes()[0];
            let o = &self.local[i];
            format!(
                "condition (ii) fails at node {i}: local signal not persistently exciting of order {} (rank {} of {})",
                o.order,
                o.rank.map_or("n/a".to_string(), |r| r.to_string()),
                o.required_rank()
            )
        };
        match required {
            Identifiability::Global if !self.global.passed => Err(CliError::Precondition(global())),
            Identifiability::Local if !self.local_passed() => Err(CliError::Precondition(local())),
            Identifiability::Any if !self.global.passed && !self.local_passed() => {
                Err(CliError::Precondition(format!("{}; {}", global(), local())))
            }
            _ => Ok(()),
        }
    }
}

/// Everything built before the first solve.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub system: NetworkSystem,
    pub data: DataRun,
    pub views: Vec<(AgentDataView, HankelBlock)>,
    pub weights: Vec<NodeWeights>,
    pub pe: PeReport,
}

impl Prepared {
    pub fn layout(&self) -> &SystemLayout {
        self.system.layout()
    }

    pub fn horizon(&self) -> Horizon {
        self.scenario.horizon()
    }
}

/// Builds the network, records data and runs both PE tests. Nothing is
/// generated when the data length already violates the global bound.
pub fn prepare(scenario: &Scenario) -> Result<Prepared, CliError> {
    scenario.check_length()?;
    let layout = scenario.layout()?;
    let system = NetworkSystem::sample(layout.clone(), scenario.seed + 1).map_err(CliError::from_core)?;
    let data = generate_data(&system, scenario.data.length, scenario.data.noise, scenario.seed + 2)
        .map_err(CliError::from_core)?;
    let depth = scenario.horizon().depth();
    let views = build_agent_views(&data.trajectory, &layout, depth).map_err(CliError::from_core)?;
    let plain: Vec<AgentDataView> = views.iter().map(|(v, _)| v.clone()).collect();
    let pe = PeReport {
        global: check_condition_i(&data.trajectory.inputs, layout.n(), depth),
        local: check_condition_ii(&plain, depth),
    };
    Ok(Prepared {
        weights: scenario.weights(&layout),
        scenario: scenario.clone(),
        system,
        data,
        views,
        pe,
    })
}

/// Initial window and current state: the plant starts from a standard normal
/// state and runs the data-generation policy for `T_ini` samples.
pub fn initial_condition(prepared: &Prepared) -> (Trajectory, DVector<f64>) {
    let layout = prepared.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(prepared.scenario.seed + 3);
    let x = DVector::from_fn(layout.n(), |_, _| StandardNormal.sample(&mut rng));
    prepared
        .data
        .policy
        .run(&prepared.system, &x, prepared.horizon().t_ini, &mut rng)
        .expect("dimensions come from the layout")
}

/// Per-cell figures reported in the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub label: String,
    pub delta: f64,
    /// Fixed threshold, or `None` for the certificate threshold.
    pub fixed_rho: Option<f64>,
    pub steps: usize,
    pub initial_norm: f64,
    pub terminal_norm: f64,
    /// `sup_t ‖x(t)‖ / ‖x(0)‖`.
    pub peak_ratio: f64,
    pub total_rounds: usize,
    /// Mean `‖û(0) - u*(0)‖` against exact MPC at the logged states.
    pub mean_deviation: f64,
    pub unconverged_steps: usize,
    pub floored_steps: usize,
    /// Certified steps whose predicted inputs missed the exact plan by at least the tolerance.
    pub certificate_violations: usize,
    pub reached_stop: bool,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub log: ClosedLoopLog,
    pub comparison: MpcComparison,
    pub summary: CellSummary,
}

/// Closed loop for one threshold setting, checked against exact MPC.
pub fn run_cell(prepared: &Prepared, cell: Cell) -> Result<CellResult, CliError> {
    let scenario = &prepared.scenario;
    let layout = prepared.layout().clone();
    let mut cfg = scenario.controller_config(cell);
    let (window, current) = initial_condition(prepared);
    cfg.stop_tolerance = Some(scenario.controller.stop_ratio * current.norm());
    let (q, r) = global_weights(&layout, &prepared.weights);
    // the data problem is feasible exactly when the model problem is
    solve_lqr_kkt(&prepared.system, &q, &r, &current, prepared.horizon().t).map_err(CliError::from_oracle)?;
    let mut controller =
        Controller::new(layout.clone(), &prepared.views, &prepared.weights, cfg).map_err(CliError::from_core)?;
    let mut plant = SimulatedPlant::new(prepared.system.clone(), current.clone());
    let log = controller
        .run(&mut plant, &window, &current)
        .map_err(CliError::from_core)?;

    let comparison =
        compare_to_exact_mpc(&prepared.system, &q, &r, prepared.horizon().t, &log).map_err(CliError::from_oracle)?;
    let states = log.states();
    let initial_norm = current.norm();
    let peak = states.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let summary = CellSummary {
        label: cell.label(),
        delta: cell.delta(),
        fixed_rho: cell.fixed_rho(),
        steps: log.records.len(),
        initial_norm,
        terminal_norm: log.final_state.norm(),
        peak_ratio: if initial_norm > 0.0 { peak / initial_norm } else { 0.0 },
        total_rounds: log.total_rounds(),
        mean_deviation: comparison.mean_input_deviation(),
        unconverged_steps: log.records.iter().filter(|r| !r.converged).count(),
        floored_steps: log.records.iter().filter(|r| r.floored).count(),
        certificate_violations: if cell.fixed_rho().is_none() {
            comparison.violations().len()
        } else {
            0
        },
        reached_stop: log.reached_stop(),
    };
    Ok(CellResult {
        cell,
        log,
        comparison,
        summary,
    })
}

/// Runs independent cells, in parallel when the feature is enabled. Results
/// keep the order of `cells`.
pub fn run_cells(prepared: &Prepared, cells: &[Cell]) -> Vec<Result<CellResult, CliError>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cells.par_iter().map(|&c| run_cell(prepared, c)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cells.iter().map(|&c| run_cell(prepared, c)).collect()
    }
}

/// Direction of a sweep indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    NonIncreasing,
    NonDecreasing,
}

impl Trend {
    pub fn holds(self, values: &[f64]) -> bool {
        values.windows(2).all(|w| match self {
            Trend::NonIncreasing => w[1] <= w[0],
            Trend::NonDecreasing => w[1] >= w[0],
        })
    }
}

/// One monotonicity check over cells ordered by decreasing threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub family: &'static str,
    pub metric: &'static str,
    pub trend: Trend,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub holds: bool,
}

type SweepKey = fn(&CellSummary) -> Option<f64>;

/// Deviation should not grow and rounds should not shrink as the threshold
/// (fixed `ρ`, or `δ` for certificate cells) decreases.
pub fn trend_checks(summaries: &[CellSummary]) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    let families: [(&'static str, SweepKey); 2] = [
        ("rho", |s| s.fixed_rho),
        ("delta", |s| s.fixed_rho.is_none().then_some(s.delta)),
    ];
    for (family, key) in families {
        let mut cells: Vec<(f64, &CellSummary)> = summaries.iter().filter_map(|s| key(s).map(|k| (k, s))).collect();
        if cells.len() < 2 {
            continue;
        }
        cells.sort_by(|a, b| b.0.total_cmp(&a.0));
        let keys: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let metrics: [(&'static str, Trend, Vec<f64>); 2] = [
            (
                "mean_deviation",
                Trend::NonIncreasing,
                cells.iter().map(|c| c.1.mean_deviation).collect(),
            ),
            (
                "total_rounds",
                Trend::NonDecreasing,
                cells.iter().map(|c| c.1.total_rounds as f64).collect(),
            ),
        ];
        for (metric, trend, values) in metrics {
            out.push(TrendCheck {
                family,
                metric,
                trend,
                holds: trend.holds(&values),
                keys: keys.clone(),
                values,
            });
        }
    }
    out
}
