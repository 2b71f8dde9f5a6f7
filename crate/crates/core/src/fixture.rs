//! Plain-text CSV fixtures shared by the library, the oracle and the harness.
//!
//! Systems:
//!
//! ```text
//! nodes,<N>
//! node,<i>,<n_i>,<m_i>
//! edge,<i>,<j>
//! A,<i>,<j>,<row-major entries of A_ij>
//! B,<i>,<row-major entries of B_i>
//! ```
//!
//! Trajectories: a header `t,u_0,…,u_{m-1},x_0,…,x_{n-1}` followed by one row per sample.
//!
//! Named matrices: `matrix,<name>,<rows>,<cols>` followed by `<rows>` lines of values.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{Graph, NetworkSystem, SystemLayout, Trajectory};
use crate::problem::NodeProblem;

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().flexible(true).from_writer(out)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(input)
}

/// Shortest representation that parses back to the same value.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn parse<T: std::str::FromStr>(field: Option<&str>, line: u64, what: &str) -> Result<T> {
    field
        .and_then(|f| f.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("line {line}: expected {what}")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn write_system<W: Write>(out: W, system: &NetworkSystem) -> Result<()> {
    let layout = system.layout();
    let mut w = writer(out);
    w.write_record(["nodes", &layout.node_count().to_string()])?;
    for i in 0..layout.node_count() {
        w.write_record([
            "node",
            &i.to_string(),
            &layout.state_dim(i).to_string(),
            &layout.input_dim(i).to_string(),
        ])?;
    }
    for (i, j) in layout.graph().edges() {
        w.write_record(["edge", &i.to_string(), &j.to_string()])?;
    }
    for i in 0..layout.node_count() {
        let mut targets = vec![i];
        targets.extend_from_slice(layout.graph().neighbors(i));
        targets.sort_unstable();
        for j in targets {
            let blk = system.a_block(i, j).expect("block exists for neighbors");
            let mut rec = vec!["A".to_string(), i.to_string(), j.to_string()];
            rec.extend(row_major(blk).map(fmt));
            w.write_record(&rec)?;
        }
        if let Some(b) = system.b_block(i) {
            let mut rec = vec!["B".to_string(), i.to_string()];
            rec.extend(row_major(b).map(fmt));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| m[(r, c)]))
}

pub fn read_system<R: Read>(input: R) -> Result<NetworkSystem> {
    let mut nodes: Option<usize> = None;
    let mut dims: Vec<Option<(usize, usize)>> = Vec::new();
    let mut edges = Vec::new();
    let mut a_entries: Vec<(usize, usize, Vec<f64>, u64)> = Vec::new();
    let mut b_entries: Vec<(usize, Vec<f64>, u64)> = Vec::new();
    for rec in reader(input).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let values = |from: usize| -> Result<Vec<f64>> {
            rec.iter()
                .skip(from)
                .map(|f| parse(Some(f), line, "a number"))
                .collect()
        };
        match rec.get(0).map(str::trim) {
            Some("nodes") => {
                let n: usize = parse(rec.get(1), line, "node count")?;
                nodes = Some(n);
                dims = vec![None; n];
            }
            Some("node") => {
                let i: usize = parse(rec.get(1), line, "node id")?;
                let slot = dims
                    .get_mut(i)
                    .ok_or_else(|| Error::Format(format!("line {line}: node {i} before or outside `nodes`")))?;
                *slot = Some((
                    parse(rec.get(2), line, "state dimension")?,
                    parse(rec.get(3), line, "input dimension")?,
                ));
            }
            Some("edge") => edges.push((
                parse(rec.get(1), line, "edge end")?,
                parse(rec.get(2), line, "edge end")?,
            )),
            Some("A") => a_entries.push((
                parse(rec.get(1), line, "row node")?,
                parse(rec.get(2), line, "column node")?,
                values(3)?,
                line,
            )),
            Some("B") => b_entries.push((parse(rec.get(1), line, "node")?, values(2)?, line)),
            Some(other) => return Err(Error::Format(format!("line {line}: unknown record `{other}`"))),
            None => {}
        }
    }
    let n = nodes.ok_or_else(|| Error::Format("missing `nodes` record".into()))?;
    let dims: Vec<(usize, usize)> = dims
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| Error::Format(format!("missing `node` record for node {i}"))))
        .collect::<Result<_>>()?;
    let graph = Graph::from_edges(n, &edges)?;
    let layout = SystemLayout::new(
        graph,
        dims.iter().map(|d| d.0).collect(),
        dims.iter().map(|d| d.1).collect(),
    )?;
    let mut a = DMatrix::zeros(layout.n(), layout.n());
    for (i, j, vals, line) in a_entries {
        if i >= n || j >= n {
            return Err(Error::Format(format!("line {line}: block A_{i}{j} outside the graph")));
        }
        let (ri, rj) = (layout.state_range(i), layout.state_range(j));
        if vals.len() != ri.len() * rj.len() {
            return Err(Error::Format(format!(
                "line {line}: A_{i}{j} needs {} entries",
                ri.len() * rj.len()
            )));
        }
        let blk = DMatrix::from_row_slice(ri.len(), rj.len(), &vals);
        a.view_mut((ri.start, rj.start), blk.shape()).copy_from(&blk);
    }
    let mut b = DMatrix::zeros(layout.n(), layout.m());
    for (i, vals, line) in b_entries {
        let ci = layout
            .input_range(i.min(n - 1))
            .filter(|_| i < n)
            .ok_or_else(|| Error::Format(format!("line {line}: node {i} is not actuated")))?;
        let ri = layout.state_range(i);
        if vals.len() != ri.len() * ci.len() {
            return Err(Error::Format(format!(
                "line {line}: B_{i} needs {} entries",
                ri.len() * ci.len()
            )));
        }
        let blk = DMatrix::from_row_slice(ri.len(), ci.len(), &vals);
        b.view_mut((ri.start, ci.start), blk.shape()).copy_from(&blk);
    }
    NetworkSystem::from_dense(layout, &a, &b)
}

pub fn write_trajectory<W: Write>(out: W, trajectory: &Trajectory) -> Result<()> {
    let mut w = writer(out);
    let (m, n) = (trajectory.inputs.nrows(), trajectory.states.nrows());
    let mut header = vec!["t".to_string()];
    header.extend((0..m).map(|k| format!("u_{k}")));
    header.extend((0..n).map(|k| format!("x_{k}")));
    w.write_record(&header)?;
    for t in 0..trajectory.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(trajectory.inputs.column(t).iter().map(|&v| fmt(v)));
        rec.extend(trajectory.states.column(t).iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Trajectory> {
    let mut records = reader(input).into_records();
    let header = records
        .next()
        .ok_or_else(|| Error::Format("empty trajectory file".into()))??;
    let m = header.iter().filter(|h| h.starts_with("u_")).count();
    let n = header.iter().filter(|h| h.starts_with("x_")).count();
    if header.get(0) != Some("t") || header.len() != 1 + m + n {
        return Err(Error::Format("line 1: expected header t,u_*,x_*".into()));
    }
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 1 + m + n {
            return Err(Error::Format(format!("line {line}: expected {} fields", 1 + m + n)));
        }
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|f| parse(Some(f), line, "a number"))
            .collect::<Result<_>>()?;
        cols.push(vals);
    }
    let len = cols.len();
    Ok(Trajectory {
        inputs: DMatrix::from_fn(m, len, |r, t| cols[t][r]),
        states: DMatrix::from_fn(n, len, |r, t| cols[t][m + r]),
        consistent: false,
    })
}

pub fn write_matrices<W: Write>(out: W, matrices: &[(String, DMatrix<f64>)]) -> Result<()> {
    let mut w = writer(out);
    for (name, mat) in matrices {
        w.write_record(["matrix", name, &mat.nrows().to_string(), &mat.ncols().to_string()])?;
        for r in 0..mat.nrows() {
            let rec: Vec<String> = mat.row(r).iter().map(|&v| fmt(v)).collect();
            if rec.is_empty() {
                w.write_record([""])?;
            } else {
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrices<R: Read>(input: R) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut out = Vec::new();
    let mut records = reader(input).into_records();
    while let Some(rec) = records.next() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.get(0) != Some("matrix") {
            return Err(Error::Format(format!("line {line}: expected a `matrix` record")));
        }
        let name = rec.get(1).unwrap_or_default().to_string();
        let rows: usize = parse(rec.get(2), line, "row count")?;
        let cols: usize = parse(rec.get(3), line, "column count")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = records
                .next()
                .ok_or_else(|| Error::Format(format!("matrix `{name}` is truncated")))??;
            let rl = line_of(&row);
            let vals: Vec<f64> = if cols == 0 {
                Vec::new()
            } else {
                row.iter()
                    .map(|f| parse(Some(f), rl, "a number"))
                    .collect::<Result<_>>()?
            };
            if vals.len() != cols {
                return Err(Error::Format(format!(
                    "line {rl}: matrix `{name}` needs {cols} columns"
                )));
            }
            data.extend(vals);
        }
        out.push((name, DMatrix::from_row_slice(rows, cols, &data)));
    }
    Ok(out)
}

/// Named matrices describing one agent's QP: `Q_i`, `A_i_i`, `A_i_j` per
/// coupled neighbor and `b_i` (a column).
pub fn problem_matrices(problem: &NodeProblem) -> Vec<(String, DMatrix<f64>)> {
    let i = problem.node();
    let qp = problem.qp();
    let d = qp.dim();
    let mut q = DMatrix::zeros(d, d);
    for (off, blk) in &qp.cost {
        q.view_mut((*off, *off), blk.shape()).copy_from(blk);
    }
    let mut out = vec![(format!("Q_{i}"), q), (format!("A_{i}_{i}"), qp.own.clone())];
    for c in &qp.couplings {
        out.push((format!("A_{i}_{}", c.neighbor), c.block.clone()));
    }
    out.push((
        format!("b_{i}"),
        DMatrix::from_column_slice(qp.rhs.len(), 1, qp.rhs.as_slice()),
    ));
    out
}

/// Convenience for single vectors stored as one-column matrices.
pub fn column(m: &DMatrix<f64>) -> DVector<f64> {
    m.column(0).into_owned()
}
