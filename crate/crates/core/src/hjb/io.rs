//! Solution files: one JSON header line followed by a CSV body with one row
//! per grid node.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::Grid;
use super::solver::{HjbSolution, SolveMeta};
use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const SOLUTION_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    grid: Grid,
    params: ModelParams,
    cost: CostSpec,
    rho: f64,
    meta: SolveMeta,
}

fn column_names(d: usize) -> Vec<String> {
    let mut cols = vec!["node".to_string()];
    cols.extend((0..d).map(|a| format!("x{a}")));
    cols.push("v".into());
    cols.push("residual".into());
    for i in 0..d {
        for j in 0..d {
            cols.push(format!("u{i}{j}"));
        }
    }
    cols.extend((0..d).map(|a| format!("p{a}")));
    cols
}

/// Writes a solution to `path`.
pub fn write_solution(sol: &HjbSolution, path: &Path) -> Result<()> {
    let d = sol.d();
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        schema_version: SOLUTION_SCHEMA_VERSION,
        grid: sol.grid.clone(),
        params: sol.params.clone(),
        cost: sol.cost.clone(),
        rho: sol.rho,
        meta: sol.meta.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(column_names(d))?;
    let mut x = vec![0.0; d];
    let mut rec: Vec<String> = Vec::new();
    for node in 0..sol.grid.len() {
        sol.grid.coords_into(node, &mut x);
        rec.clear();
        rec.push(node.to_string());
        rec.extend(x.iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", sol.v[node]));
        rec.push(format!("{:e}", sol.residual[node]));
        rec.extend(sol.policy[node * d * d..(node + 1) * d * d].iter().map(|v| format!("{v:e}")));
        rec.extend(sol.gradient[node * d..(node + 1) * d].iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a solution written by [`write_solution`].
pub fn read_solution(path: &Path) -> Result<HjbSolution> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line)?;
    if header.schema_version != SOLUTION_SCHEMA_VERSION {
        return Err(Error::Argument(format!("unsupported solution schema version {}", header.schema_version)));
    }
    let d = header.grid.d();
    let n = header.grid.len();
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().ne(column_names(d).iter().map(String::as_str)) {
        return Err(Error::Argument("solution CSV columns do not match the header".into()));
    }
    let mut v = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    let mut policy = Vec::with_capacity(n * d * d);
    let mut gradient = Vec::with_capacity(n * d);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Argument(format!("bad value in row {row}, column {k}")))
        };
        v.push(num(1 + d)?);
        residual.push(num(2 + d)?);
        for k in 0..d * d {
            policy.push(num(3 + d + k)?);
        }
        for k in 0..d {
            gradient.push(num(3 + d + d * d + k)?);
        }
    }
    if v.len() != n {
        return Err(Error::Argument(format!("solution has {} rows, grid has {n} nodes", v.len())));
    }
    Ok(HjbSolution {
        grid: header.grid,
        params: header.params,
        cost: header.cost,
        v,
        rho: header.rho,
        policy,
        gradient,
        residual,
        meta: header.meta,
    })
}
