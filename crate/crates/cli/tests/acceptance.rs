//! Acceptance gate: one line per criterion, nonzero exit if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddpc::data::{combine_columns, verify_membership};
use ddpc::par::Execution;
use ddpc::problem::{assemble_global, assemble_prediction, bound_pinv_norm, build_problems, network_qp, DataBasis};
use ddpc::solver::{certificate_threshold, solve, SaddleState, SaddleSystem, SolverConfig};
use ddpc_cli::pipeline::{self, Trend};
use ddpc_cli::scenario::{Cell, Scenario};
use ddpc_oracle::suite::{random_instance, Instance, SuiteSpec};
use ddpc_oracle::{global_weights, solve_deepc_centralized, solve_lqr_kkt, verify_trajectory};

const EQUIVALENCE_INSTANCES: u64 = 50;
const EQUIVALENCE_TOL: f64 = 1e-6;
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(60);
const ROUND_TRIP_TOL: f64 = 1e-8;
const FLOW_INSTANCES: u64 = 20;
const FLOW_ROUNDS: usize = 1000;
const FLOW_TOL: f64 = 1e-12;
const CERTIFIED_RUNS: usize = 100;
const CERTIFICATE_DELTAS: [f64; 3] = [1e-1, 1e-2, 1e-3];
const STABILITY_DECAY: f64 = 1e-3;
const STABILITY_PEAK: f64 = 5.0;
const STABILITY_STEPS: usize = 60;
const STABILITY_BUDGET: Duration = Duration::from_secs(300);
const SWEEP_RHO: [f64; 3] = [1e-1, 1e-2, 1e-3];

type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    Scenario::load(&path).expect("bundled scenario parses")
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn equivalence(suite: &[Instance]) -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for inst in suite {
        let (ini, x0) = inst.random_window(inst.seed + 7);
        let (q, r) = global_weights(inst.layout(), &inst.weights);
        let t = inst.horizon.t;
        let gap = match (
            solve_lqr_kkt(&inst.system, &q, &r, &x0, t),
            build_problems(&inst.views, &inst.weights, inst.horizon, DataBasis::Hankel, &ini)
                .map_err(ddpc_oracle::OracleError::from)
                .and_then(|p| solve_deepc_centralized(inst.layout(), &p)),
        ) {
            (Ok(lqr), Ok(sol)) => rel(&sol.prediction.inputs.columns(0, t).into_owned(), &lqr.inputs)
                .max(rel(&sol.prediction.states, &lqr.states)),
            _ => f64::INFINITY,
        };
        if !(gap < EQUIVALENCE_TOL) {
            failures += 1;
        }
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed();
    verdict(
        failures == 0 && elapsed < EQUIVALENCE_BUDGET && suite.len() >= EQUIVALENCE_INSTANCES as usize,
        format!(
            "{} instances, worst relative error {worst:.1e} (< {EQUIVALENCE_TOL:.0e}), {failures} failures, {:.1} s (< {} s)",
            suite.len(),
            elapsed.as_secs_f64(),
            EQUIVALENCE_BUDGET.as_secs()
        ),
    )
}

fn round_trip(suite: &[Instance]) -> Verdict {
    let mut worst_membership: f64 = 0.0;
    let mut worst_dynamics: f64 = 0.0;
    for inst in suite {
        let layout = inst.layout();
        let depth = inst.horizon.depth();
        let blocks: Vec<_> = inst.views.iter().map(|(_, b)| b.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(inst.seed);
        for _ in 0..5 {
            let x0 = DVector::from_fn(layout.n(), |_, _| rng.gen_range(-1.0..1.0));
            let u = DMatrix::from_fn(layout.m(), depth, |_, _| rng.gen_range(-1.0..1.0));
            let (traj, _) = inst.system.simulate(&x0, &u).unwrap();
            let candidates: Vec<_> = inst
                .views
                .iter()
                .map(|(v, _)| v.stack_window(&v.select_trajectory(&traj)))
                .collect();
            for d in verify_membership(&blocks, &candidates).unwrap() {
                worst_membership = worst_membership.max(d);
            }

            let g = DVector::from_fn(blocks[0].columns(), |_, _| rng.gen_range(-1.0..1.0));
            let mut combined = combine_columns(layout, &blocks, &g).unwrap();
            combined.consistent = true;
            worst_dynamics = worst_dynamics.max(verify_trajectory(&inst.system, &combined).unwrap());
        }
    }
    verdict(
        worst_membership < ROUND_TRIP_TOL && worst_dynamics < ROUND_TRIP_TOL,
        format!(
            "{} instances x 5 windows, worst membership residual {worst_membership:.1e}, \
             worst dynamics residual {worst_dynamics:.1e} (< {ROUND_TRIP_TOL:.0e})",
            suite.len()
        ),
    )
}

fn distributed_flow(suite: &[Instance]) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut payload_ok = true;
    let mut messages = 0;
    for inst in suite.iter().take(FLOW_INSTANCES as usize) {
        let (ini, _) = inst.random_window(inst.seed);
        let problems = build_problems(&inst.views, &inst.weights, inst.horizon, DataBasis::Orthonormal, &ini).unwrap();
        let qp = network_qp(&problems).unwrap();
        let sys = SaddleSystem::assemble(&qp, 0.3);
        let h = SolverConfig::default_step(ddpc::linalg::spectral_norm(&sys.m));
        let mut cfg = SolverConfig::new(h, f64::MIN_POSITIVE);
        cfg.augmentation = 0.3;
        cfg.max_rounds = FLOW_ROUNDS + 1;
        cfg.execution = Execution::Sequential;
        cfg.record_messages = true;
        let out = solve(&qp, &cfg, SaddleState::zeros(&qp)).unwrap();
        let mut y = DVector::zeros(qp.primal_dim() + qp.dual_dim());
        for _ in 0..FLOW_ROUNDS {
            y = sys.euler_step(&y, h);
        }
        worst = worst.max((out.state.stack() - &y).amax());

        let graph = inst.layout().graph();
        let future = inst.horizon.future_len();
        let mut pairs = BTreeSet::new();
        for msg in &out.messages {
            let expected = inst.layout().state_dim(msg.sender) * future + problems[msg.sender].constraint_count();
            payload_ok &= graph.has_edge(msg.sender, msg.recipient) && msg.payload_len() == expected;
            pairs.insert((msg.sender, msg.recipient));
        }
        let directed: BTreeSet<_> = graph.edges().into_iter().flat_map(|(i, j)| [(i, j), (j, i)]).collect();
        payload_ok &= pairs == directed;
        messages += out.messages.len();
    }
    verdict(
        worst < FLOW_TOL && payload_ok,
        format!(
            "{FLOW_INSTANCES} instances x {FLOW_ROUNDS} rounds, max componentwise gap {worst:.1e} (< {FLOW_TOL:.0e}), \
             {messages} messages audited, neighbor-only payloads {}",
            if payload_ok { "yes" } else { "no" }
        ),
    )
}

fn certificate() -> Verdict {
    let spec = SuiteSpec {
        actuation_prob: 1.0,
        ..SuiteSpec::default()
    };
    let mut certified = 0;
    let mut sound = 0;
    let mut uncertified = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut instances = 0;
    let mut bound_holds = 0;
    let mut seed = 0;
    while certified < CERTIFIED_RUNS {
        let inst = random_instance(spec, 1000 + seed);
        seed += 1;
        instances += 1;
        let (ini, x0) = inst.random_window(inst.seed + 7);
        let (q, r) = global_weights(inst.layout(), &inst.weights);
        let t = inst.horizon.t;
        let lqr = solve_lqr_kkt(&inst.system, &q, &r, &x0, t).unwrap();
        let problems = build_problems(&inst.views, &inst.weights, inst.horizon, DataBasis::Orthonormal, &ini).unwrap();
        let qp = network_qp(&problems).unwrap();
        let cert = assemble_global(&problems, 0.3).unwrap();
        let plain = assemble_global(&problems, 0.0).unwrap();
        let local = (0..qp.len()).map(|i| bound_pinv_norm(&qp, i)).fold(0.0, f64::max);
        if local >= plain.pinv_norm {
            bound_holds += 1;
        }
        let x_last = ini.states.column(inst.horizon.t_ini - 1).norm();
        for delta in CERTIFICATE_DELTAS {
            let tol = delta * x_last.min(1.0);
            let rho = certificate_threshold(tol, qp.len(), cert.pinv_norm).unwrap();
            let mut cfg = SolverConfig::new(SolverConfig::default_step(cert.norm), rho);
            cfg.augmentation = 0.3;
            cfg.max_rounds = 200_000;
            let out = solve(&qp, &cfg, SaddleState::zeros(&qp)).unwrap();
            if !out.converged {
                uncertified += 1;
                continue;
            }
            certified += 1;
            let pred = assemble_prediction(inst.layout(), &problems, &out.state.z);
            let err = (pred.inputs.columns(0, t) - &lqr.inputs).norm();
            worst_ratio = worst_ratio.max(err / tol);
            if err < tol {
                sound += 1;
            }
        }
    }
    verdict(
        sound == certified && bound_holds == instances,
        format!(
            "{certified} certified runs ({uncertified} hit the round budget), ‖û - u*‖ < δ_eff in {sound}/{certified} \
             (worst ratio {worst_ratio:.2}); per-agent ‖M†‖ bound exceeds the true value in {bound_holds}/{instances} instances"
        ),
    )
}

fn stability() -> Verdict {
    let star = scenario("star.toml");
    let start = Instant::now();
    let prepared = match pipeline::prepare(&star) {
        Ok(p) => p,
        Err(e) => return verdict(false, format!("star scenario did not prepare: {e}")),
    };
    let result = match pipeline::run_cell(&prepared, Cell::Certificate { delta: 1e-2 }) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("star loop failed: {e}")),
    };
    let elapsed = start.elapsed();
    let states = result.log.states();
    let x0 = states[0].norm();
    let reached = states.iter().position(|x| x.norm() < STABILITY_DECAY * x0);
    let peak = result.summary.peak_ratio;
    let structure = prepared.layout().node_count() == 10
        && prepared.layout().state_dims().iter().all(|&d| d == 1)
        && prepared.horizon().t == 5
        && star.controller.delta == 1e-2;
    verdict(
        structure
            && reached.is_some_and(|t| t <= STABILITY_STEPS)
            && peak <= STABILITY_PEAK
            && elapsed < STABILITY_BUDGET,
        format!(
            "star N = 10, T = 5, δ = 1e-2: ‖x(t)‖ < {STABILITY_DECAY:.0e}‖x(0)‖ at step {}, no infeasible step, \
             sup ‖x(t)‖/‖x(0)‖ = {peak:.2} (≤ {STABILITY_PEAK}), {} uncertified steps, {:.1} s (< {} s)",
            reached.map_or("never".to_string(), |t| t.to_string()),
            result.summary.unconverged_steps,
            elapsed.as_secs_f64(),
            STABILITY_BUDGET.as_secs()
        ),
    )
}

fn sweep() -> Verdict {
    let cells: Vec<Cell> = SWEEP_RHO.iter().map(|&rho| Cell::Fixed { delta: 1e-2, rho }).collect();
    let mut passed = true;
    let mut parts = Vec::new();
    for name in ["star.toml", "nws.toml"] {
        let sc = scenario(name);
        let prepared = pipeline::prepare(&sc).expect("bundled scenario prepares");
        let results: Result<Vec<_>, _> = pipeline::run_cells(&prepared, &cells).into_iter().collect();
        let Ok(results) = results else {
            return verdict(false, format!("{name}: a sweep cell failed"));
        };
        let summaries: Vec<_> = results.iter().map(|r| r.summary.clone()).collect();
        let checks = pipeline::trend_checks(&summaries);
        let find = |metric: &str| checks.iter().find(|c| c.family == "rho" && c.metric == metric).unwrap();
        let dev = find("mean_deviation");
        let rounds = find("total_rounds");
        passed &= dev.trend == Trend::NonIncreasing && dev.holds && rounds.holds;
        let local = prepared.pe.local_passed();
        let pe_ok = if sc.graph.kind == ddpc_cli::scenario::GraphKind::Star {
            local
        } else {
            !local && prepared.pe.global.passed
        };
        passed &= pe_ok;
        parts.push(format!(
            "{}: deviation {:?}, rounds {:?}, condition (ii) {}",
            sc.name,
            dev.values.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>(),
            rounds.values,
            if local {
                "holds".to_string()
            } else {
                format!("fails at nodes {:?}", prepared.pe.failing_nodes())
            }
        ));
    }
    verdict(passed, parts.join("; "))
}

fn validation_gates() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let base =
        std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/star.toml")).unwrap();
    let cases = [
        // below (n + m + 1)(T_ini + T) - 1 = 125
        (
            "remark",
            base.replace("length = 300", "length = 120"),
            "condition (i): data length",
        ),
        // above the bound but too short for inputs of order n + T_ini + T + 1
        (
            "rank",
            base.replace("length = 300", "length = 150"),
            "condition (i): inputs are not",
        ),
        (
            "local",
            std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/nws.toml"))
                .unwrap()
                .replace("identifiability = \"any\"", "identifiability = \"ii\""),
            "condition (ii) fails at node",
        ),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, text, expected) in cases {
        let path = tmp.path().join(format!("{name}.toml"));
        std::fs::write(&path, text).unwrap();
        let out = tmp.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_ddpc"))
            .args(["run", path.to_str().unwrap(), "-o", out.to_str().unwrap()])
            .output()
            .unwrap();
        let stderr = String::from_utf8_lossy(&o.stderr);
        // nothing beyond the PE report may be written when a gate trips
        let written: Vec<_> = std::fs::read_dir(&out)
            .map(|d| {
                d.map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                    .collect()
            })
            .unwrap_or_default();
        let ok =
            o.status.code() == Some(3) && stderr.contains(expected) && written.iter().all(|f| f == "pe_report.csv");
        passed &= ok;
        parts.push(format!(
            "{name}: exit {:?}, {}",
            o.status.code(),
            if ok { "named" } else { "MISSING" }
        ));
    }
    verdict(passed, parts.join(", "))
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let suite: Vec<Instance> = (0..EQUIVALENCE_INSTANCES)
        .map(|s| random_instance(SuiteSpec::default(), s))
        .collect();
    let criteria: [(&str, Check); 7] = [
        ("data-based optimizer equals LQR", Box::new(|| equivalence(&suite))),
        ("Hankel round trip", Box::new(|| round_trip(&suite))),
        (
            "distributed rounds equal centralized flow",
            Box::new(|| distributed_flow(&suite)),
        ),
        ("certificate soundness", Box::new(certificate)),
        ("closed-loop stability", Box::new(stability)),
        ("threshold sweep trade-off", Box::new(sweep)),
        ("validation gates", Box::new(validation_gates)),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.passed);
        println!(
            "criterion {} [{}] {name} ({:.1} s): {}",
            k + 1,
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
