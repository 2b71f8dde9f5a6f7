//! Scenario files: TOML with one table per pipeline stage.
//!
//! ```toml
//! seed = 7
//!
//! [graph]
//! kind = "star"        # "star", "nws" or "edges"
//! nodes = 10
//!
//! [system]
//! state_dim = 1
//! input_dim = 1
//! actuated = "all"     # "all", "even", "odd" or a list of node ids
//!
//! [data]
//! length = 200
//! identifiability = "i"
//!
//! [horizon]
//! t_ini = 1
//! t = 5
//! ```
//!
//! Every other key has a default; the resolved file (defaults included) is
//! embedded as `#` lines at the top of every CSV the runner writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ddpc::controller::ControllerConfig;
use ddpc::network::{build_graph, GraphSpec, SystemLayout};
use ddpc::problem::{DataBasis, Horizon, NodeWeights};
use ddpc::solver::CertificateRule;

use nalgebra::DMatrix;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Base seed; the graph, system, data and initial state use `seed`,
    /// `seed + 1`, `seed + 2` and `seed + 3`.
    #[serde(default)]
    pub seed: u64,
    pub graph: GraphSection,
    pub system: SystemSection,
    pub data: DataSection,
    pub horizon: HorizonSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Star,
    Nws,
    Edges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub kind: GraphKind,
    pub nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortcut_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Actuation {
    Named(String),
    Nodes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub state_dim: usize,
    #[serde(default = "one")]
    pub input_dim: usize,
    #[serde(default = "all")]
    pub actuated: Actuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Identifiability {
    /// Global input excitation.
    #[serde(rename = "i")]
    Global,
    /// Per-node excitation of the local signals.
    #[serde(rename = "ii")]
    Local,
    /// Either condition.
    #[serde(rename = "any")]
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub length: usize,
    #[serde(default = "unit")]
    pub noise: f64,
    #[serde(default = "global")]
    pub identifiability: Identifiability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub t_ini: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    /// Multiple of the identity on every state block.
    pub q: f64,
    /// Multiple of the identity on every input block.
    pub r: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        WeightsSection { q: 1.0, r: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Corrected,
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Hankel,
    Orthonormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub delta: f64,
    /// Fixed residual threshold; unset means the certificate threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub rule: Rule,
    pub basis: Basis,
    pub augmentation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub steps: usize,
    pub max_rounds: usize,
    pub threshold_floor: f64,
    pub warm_start: bool,
    /// Stop once `‖x‖` falls below this multiple of `‖x(0)‖`.
    pub stop_ratio: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            delta: 1e-2,
            rho: None,
            rule: Rule::Corrected,
            basis: Basis::Orthonormal,
            augmentation: 0.3,
            step_size: None,
            steps: 60,
            max_rounds: 200_000,
            threshold_floor: 1e-12,
            warm_start: true,
            stop_ratio: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Tolerances run with the certificate threshold.
    #[serde(default)]
    pub delta: Vec<f64>,
    /// Fixed residual thresholds.
    #[serde(default)]
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
        }
    }
}

fn all() -> Actuation {
    Actuation::Named("all".into())
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn global() -> Identifiability {
    Identifiability::Global
}

/// Threshold mode of one closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Certificate { delta: f64 },
    Fixed { delta: f64, rho: f64 },
}

impl Cell {
    pub fn delta(&self) -> f64 {
        match *self {
            Cell::Certificate { delta } | Cell::Fixed { delta, .. } => delta,
        }
    }

    pub fn fixed_rho(&self) -> Option<f64> {
        match *self {
            Cell::Fixed { rho, .. } => Some(rho),
            Cell::Certificate { .. } => None,
        }
    }

    /// File-name friendly label, e.g. `delta_1e-2` or `rho_1e-3`.
    pub fn label(&self) -> String {
        match *self {
            Cell::Certificate { delta } => format!("delta_{delta:e}"),
            Cell::Fixed { rho, .. } => format!("rho_{rho:e}"),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Scenario::parse(&text).map_err(|e| match e {
            CliError::Parse(msg) => CliError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The resolved scenario, defaults included.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Field-level checks that need no computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: String| Err(CliError::Parse(format!("field `{field}`: {why}")));
        let g = &self.graph;
        if g.nodes < 2 {
            return bad("graph.nodes", format!("need at least 2 nodes (got {})", g.nodes));
        }
        match g.kind {
            GraphKind::Nws => {
                let Some(k) = g.ring_degree else {
                    return bad("graph.ring_degree", "required for kind = \"nws\"".into());
                };
                if k < 2 || k % 2 == 1 || k >= g.nodes {
                    return bad(
                        "graph.ring_degree",
                        format!("must be even, at least 2 and below nodes (got {k})"),
                    );
                }
                let Some(p) = g.shortcut_prob else {
                    return bad("graph.shortcut_prob", "required for kind = \"nws\"".into());
                };
                if !(0.0..=1.0).contains(&p) {
                    return bad("graph.shortcut_prob", format!("must lie in [0, 1] (got {p})"));
                }
            }
            GraphKind::Edges => {
                if g.edges.is_empty() {
                    return bad("graph.edges", "required for kind = \"edges\"".into());
                }
            }
            GraphKind::Star => {}
        }
        if self.system.state_dim == 0 {
            return bad("system.state_dim", "must be positive".into());
        }
        if self.system.input_dim == 0 {
            return bad("system.input_dim", "must be positive".into());
        }
        match &self.system.actuated {
            Actuation::Named(s) if !matches!(s.as_str(), "all" | "even" | "odd") => {
                return bad(
                    "system.actuated",
                    format!("expected \"all\", \"even\", \"odd\" or a list (got {s:?})"),
                );
            }
            Actuation::Nodes(list) => {
                if list.is_empty() {
                    return bad("system.actuated", "at least one node must be actuated".into());
                }
                if let Some(&i) = list.iter().find(|&&i| i >= g.nodes) {
                    return bad(
                        "system.actuated",
                        format!("node {i} does not exist (nodes are 0..{})", g.nodes),
                    );
                }
            }
            _ => {}
        }
        if !(self.data.noise > 0.0) {
            return bad("data.noise", format!("must be positive (got {})", self.data.noise));
        }
        if self.horizon.t_ini == 0 {
            return bad("horizon.t_ini", "must be positive".into());
        }
        if self.horizon.t == 0 {
            return bad("horizon.t", "must be positive".into());
        }
        if !(self.weights.q > 0.0) || !(self.weights.r > 0.0) {
            return bad("weights", "q and r must be positive".into());
        }
        let c = &self.controller;
        if !(c.delta > 0.0) {
            return bad("controller.delta", format!("must be positive (got {})", c.delta));
        }
        if let Some(rho) = c.rho {
            if !(rho > 0.0) {
                return bad("controller.rho", format!("must be positive (got {rho})"));
            }
        }
        if !(c.augmentation >= 0.0) {
            return bad(
                "controller.augmentation",
                format!("must be non-negative (got {})", c.augmentation),
            );
        }
        if let Some(h) = c.step_size {
            if !(h > 0.0) {
                return bad("controller.step_size", format!("must be positive (got {h})"));
            }
        }
        if c.steps == 0 {
            return bad("controller.steps", "must be positive".into());
        }
        if c.max_rounds == 0 {
            return bad("controller.max_rounds", "must be positive".into());
        }
        if !(c.threshold_floor > 0.0) {
            return bad("controller.threshold_floor", "must be positive".into());
        }
        if !(c.stop_ratio > 0.0 && c.stop_ratio < 1.0) {
            return bad(
                "controller.stop_ratio",
                format!("must lie in (0, 1) (got {})", c.stop_ratio),
            );
        }
        if let Some(v) = self.sweep.delta.iter().find(|v| !(**v > 0.0)) {
            return bad("sweep.delta", format!("values must be positive (got {v})"));
        }
        if let Some(v) = self.sweep.rho.iter().find(|v| !(**v > 0.0)) {
            return bad("sweep.rho", format!("values must be positive (got {v})"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> Horizon {
        Horizon::new(self.horizon.t_ini, self.horizon.t).expect("validated")
    }

    pub fn graph_spec(&self) -> GraphSpec {
        let g = &self.graph;
        match g.kind {
            GraphKind::Star => GraphSpec::Star { nodes: g.nodes },
            GraphKind::Nws => GraphSpec::NewmanWattsStrogatz {
                nodes: g.nodes,
                ring_degree: g.ring_degree.expect("validated"),
                shortcut_prob: g.shortcut_prob.expect("validated"),
            },
            GraphKind::Edges => GraphSpec::EdgeList {
                nodes: g.nodes,
                edges: g.edges.iter().map(|e| (e[0], e[1])).collect(),
            },
        }
    }

    pub fn actuated(&self) -> Vec<usize> {
        let nodes = 0..self.graph.nodes;
        match &self.system.actuated {
            Actuation::Nodes(list) => list.clone(),
            Actuation::Named(s) => match s.as_str() {
                "even" => nodes.filter(|i| i % 2 == 0).collect(),
                "odd" => nodes.filter(|i| i % 2 == 1).collect(),
                _ => nodes.collect(),
            },
        }
    }

    pub fn layout(&self) -> Result<SystemLayout, CliError> {
        let graph = build_graph(&self.graph_spec(), self.seed).map_err(CliError::from_core)?;
        SystemLayout::uniform(graph, self.system.state_dim, &self.actuated(), self.system.input_dim)
            .map_err(CliError::from_core)
    }

    /// Rejects data lengths below the bound needed for global identifiability,
    /// before anything is generated.
    pub fn check_length(&self) -> Result<(), CliError> {
        let nodes = self.graph.nodes;
        let n = nodes * self.system.state_dim;
        let m = self.actuated().len() * self.system.input_dim;
        let h = self.horizon();
        let needed = h.min_data_length(n, m);
        if self.data.identifiability == Identifiability::Global && self.data.length < needed {
            return Err(CliError::Precondition(format!(
                "condition (i): data length {} is below (n + m + 1)(T_ini + T) - 1 = {needed} \
                 for n = {n}, m = {m}, T_ini = {}, T = {}",
                self.data.length, h.t_ini, h.t
            )));
        }
        if self.data.length < h.depth() {
            return Err(CliError::Precondition(format!(
                "data length {} is shorter than one window of T_ini + T + 1 = {} samples",
                self.data.length,
                h.depth()
            )));
        }
        Ok(())
    }

    pub fn weights(&self, layout: &SystemLayout) -> Vec<NodeWeights> {
        (0..layout.node_count())
            .map(|i| NodeWeights {
                q: DMatrix::identity(layout.state_dim(i), layout.state_dim(i)) * self.weights.q,
                r: layout
                    .input_range(i)
                    .map(|r| DMatrix::identity(r.len(), r.len()) * self.weights.r),
            })
            .collect()
    }

    pub fn controller_config(&self, cell: Cell) -> ControllerConfig {
        let c = &self.controller;
        let mut cfg = ControllerConfig::new(self.horizon(), cell.delta());
        cfg.rule = match c.rule {
            Rule::Corrected => CertificateRule::Corrected,
            Rule::Printed => CertificateRule::Printed,
        };
        cfg.fixed_threshold = cell.fixed_rho();
        cfg.threshold_floor = c.threshold_floor;
        cfg.max_steps = c.steps;
        cfg.warm_start = c.warm_start;
        cfg.basis = match c.basis {
            Basis::Hankel => DataBasis::Hankel,
            Basis::Orthonormal => DataBasis::Orthonormal,
        };
        cfg.augmentation = c.augmentation;
        cfg.step_size = c.step_size;
        cfg.max_rounds = c.max_rounds;
        cfg
    }

    /// The single cell used by `run`.
    pub fn run_cell(&self) -> Cell {
        match self.controller.rho {
            Some(rho) => Cell::Fixed {
                delta: self.controller.delta,
                rho,
            },
            None => Cell::Certificate {
                delta: self.controller.delta,
            },
        }
    }

    /// Cells of `sweep`; fewer than two is a usage error.
    pub fn sweep_cells(&self) -> Result<Vec<Cell>, CliError> {
        let mut cells: Vec<Cell> = self
            .sweep
            .delta
            .iter()
            .map(|&delta| Cell::Certificate { delta })
            .collect();
        cells.extend(self.sweep.rho.iter().map(|&rho| Cell::Fixed {
            delta: self.controller.delta,
            rho,
        }));
        if cells.len() < 2 {
            return Err(CliError::Usage(format!(
                "a sweep needs at least two cells in [sweep] delta/rho (got {})",
                cells.len()
            )));
        }
        Ok(cells)
    }
}
