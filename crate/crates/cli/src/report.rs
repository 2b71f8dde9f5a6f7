//! CSV artifacts. Every file starts with the resolved scenario as `#` lines.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ddpc::fixture;

use crate::pipeline::{CellResult, CellSummary, PeReport, Prepared, TrendCheck};
use crate::CliError;

fn create(dir: &Path, name: &str, config: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join(name))?);
    for line in config.lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(out)
}

fn finish(mut out: BufWriter<File>) -> Result<(), CliError> {
    out.flush()?;
    Ok(())
}

fn rank(r: Option<usize>) -> String {
    r.map_or_else(String::new, |r| r.to_string())
}

pub fn write_pe_report(dir: &Path, config: &str, pe: &PeReport) -> Result<PathBuf, CliError> {
    let mut out = create(dir, "pe_report.csv", config)?;
    writeln!(out, "condition,node,signal_dim,order,length,rank,required_rank,passed")?;
    let g = &pe.global;
    writeln!(
        out,
        "i,all,{},{},{},{},{},{}",
        g.signal_dim,
        g.order,
        g.length,
        rank(g.rank),
        g.required_rank(),
        g.passed
    )?;
    for (i, o) in pe.local.iter().enumerate() {
        writeln!(
            out,
            "ii,{i},{},{},{},{},{},{}",
            o.signal_dim,
            o.order,
            o.length,
            rank(o.rank),
            o.required_rank(),
            o.passed
        )?;
    }
    finish(out)?;
    Ok(dir.join("pe_report.csv"))
}

pub fn pe_text(pe: &PeReport) -> String {
    let mut s = format!(
        "condition (i): {} (rank {} of {})\n",
        if pe.global.passed { "holds" } else { "fails" },
        rank(pe.global.rank),
        pe.global.required_rank()
    );
    let failing = pe.failing_nodes();
    if failing.is_empty() {
        s.push_str("condition (ii): holds at every node\n");
    } else {
        let nodes: Vec<String> = failing.iter().map(|i| i.to_string()).collect();
        s.push_str(&format!("condition (ii): fails at node(s) {}\n", nodes.join(", ")));
    }
    s
}

/// System and data fixtures for `gen-data`.
pub fn write_data(dir: &Path, prepared: &Prepared) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let file = BufWriter::new(File::create(dir.join("system.csv"))?);
    fixture::write_system(file, &prepared.system).map_err(CliError::from_core)?;
    let file = BufWriter::new(File::create(dir.join("data.csv"))?);
    fixture::write_trajectory(file, &prepared.data.trajectory).map_err(CliError::from_core)?;
    Ok(())
}

/// `closed_loop_<cell>.csv` and `states_<cell>.csv` for one cell.
pub fn write_cell(dir: &Path, config: &str, result: &CellResult) -> Result<(), CliError> {
    let label = &result.summary.label;
    let mut out = create(dir, &format!("closed_loop_{label}.csv"), config)?;
    result.log.write_csv(&mut out).map_err(CliError::from_core)?;
    finish(out)?;

    // long format: step, series, value
    let mut out = create(dir, &format!("states_{label}.csv"), config)?;
    writeln!(out, "step,series,value")?;
    for (t, x) in result.log.states().iter().enumerate() {
        for (k, v) in x.iter().enumerate() {
            writeln!(out, "{t},x_{k},{v:e}")?;
        }
        writeln!(out, "{t},norm,{:e}", x.norm())?;
    }
    for (t, x) in result.comparison.exact_states.iter().enumerate() {
        for (k, v) in x.iter().enumerate() {
            writeln!(out, "{t},mpc_x_{k},{v:e}")?;
        }
        writeln!(out, "{t},mpc_norm,{:e}", x.norm())?;
    }
    for r in &result.log.records {
        writeln!(out, "{},rounds,{}", r.step, r.rounds)?;
    }
    finish(out)
}

/// `iterations.csv`: solver rounds per step for every cell.
pub fn write_iterations(dir: &Path, config: &str, results: &[CellResult]) -> Result<(), CliError> {
    let mut out = create(dir, "iterations.csv", config)?;
    writeln!(out, "cell,step,rounds,threshold,floored,converged,bound")?;
    for res in results {
        for r in &res.log.records {
            writeln!(
                out,
                "{},{},{},{:e},{},{},{:e}",
                res.summary.label, r.step, r.rounds, r.threshold, r.floored, r.converged, r.bound
            )?;
        }
    }
    finish(out)
}

fn rho_text(s: &CellSummary) -> String {
    s.fixed_rho
        .map_or_else(|| "certificate".to_string(), |r| format!("{r:e}"))
}

pub fn write_summary(dir: &Path, config: &str, summaries: &[CellSummary]) -> Result<(), CliError> {
    let mut out = create(dir, "summary.csv", config)?;
    writeln!(
        out,
        "cell,delta,rho,steps,initial_norm,terminal_norm,peak_ratio,total_rounds,mean_deviation,\
         unconverged_steps,floored_steps,certificate_violations,reached_stop"
    )?;
    for s in summaries {
        writeln!(
            out,
            "{},{:e},{},{},{:e},{:e},{:e},{},{:e},{},{},{},{}",
            s.label,
            s.delta,
            rho_text(s),
            s.steps,
            s.initial_norm,
            s.terminal_norm,
            s.peak_ratio,
            s.total_rounds,
            s.mean_deviation,
            s.unconverged_steps,
            s.floored_steps,
            s.certificate_violations,
            s.reached_stop
        )?;
    }
    finish(out)
}

pub fn write_trends(dir: &Path, config: &str, checks: &[TrendCheck]) -> Result<(), CliError> {
    let mut out = create(dir, "trend.csv", config)?;
    writeln!(out, "family,metric,direction,keys,values,holds")?;
    for c in checks {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        writeln!(
            out,
            "{},{},{:?},{},{},{}",
            c.family,
            c.metric,
            c.trend,
            join(&c.keys),
            join(&c.values),
            c.holds
        )?;
    }
    finish(out)
}

/// Fixed-width table for the terminal.
pub fn summary_table(summaries: &[CellSummary]) -> String {
    let mut s = format!(
        "{:<14} {:>11} {:>6} {:>11} {:>9} {:>10} {:>11} {:>6}\n",
        "cell", "rho", "steps", "‖x(end)‖", "peak", "rounds", "deviation", "stop"
    );
    for c in summaries {
        s.push_str(&format!(
            "{:<14} {:>11} {:>6} {:>11.3e} {:>9.3} {:>10} {:>11.3e} {:>6}\n",
            c.label,
            rho_text(c),
            c.steps,
            c.terminal_norm,
            c.peak_ratio,
            c.total_rounds,
            c.mean_deviation,
            if c.reached_stop { "yes" } else { "no" }
        ));
    }
    s
}

pub fn trend_text(checks: &[TrendCheck]) -> String {
    checks
        .iter()
        .map(|c| {
            format!(
                "{} {} as {} decreases: {}\n",
                c.metric,
                match c.trend {
                    crate::pipeline::Trend::NonIncreasing => "non-increasing",
                    crate::pipeline::Trend::NonDecreasing => "non-decreasing",
                },
                c.family,
                if c.holds { "yes" } else { "no" }
            )
        })
        .collect()
}
