//! File formats: problem documents, trajectory CSV exchange, and
//! multiplier files.
//!
//! A problem document is a TOML file declaring the dimensions, the drift and
//! control field expressions, the cone, the target rows with optional
//! halfspaces, the variation bound, and the cost. Trajectories travel as CSV
//! with one row per node and controls recorded on the left node of their
//! interval, so the final row's control cells are empty. Multiplier sets are
//! TOML with node-major adjoint arrays.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;
use crate::model::{
    cost_var_names, field_var_names, AxisTag, ControlCone, CoordBound, CostSpec, Halfspace,
    ProblemSpec, TargetSpec, VectorFieldSet,
};
use crate::pmp::MultiplierSet;
use crate::reparam::{ExtendedProcess, StrictProcess};

/// Errors from reading or writing the exchange formats.
#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("document parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("document serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
}

fn format_err(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

#[derive(Debug, Serialize, Deserialize)]
struct ProblemDoc {
    n: usize,
    m: usize,
    f: Vec<String>,
    g: Vec<Vec<String>>,
    cost: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<f64>,
    cone: ConeDoc,
    target: TargetDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConeDoc {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generators: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetDoc {
    t1: toml::Value,
    x1: Vec<toml::Value>,
    t2: toml::Value,
    x2: Vec<toml::Value>,
    #[serde(default)]
    epigraph: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    halfspaces: Vec<HalfspaceDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HalfspaceDoc {
    a: Vec<f64>,
    b: f64,
}

fn bound_endpoint(v: &toml::Value, what: &str) -> Result<f64, IoError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) => match s.trim() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => other
                .parse::<f64>()
                .map_err(|_| format_err(format!("{what}: cannot read `{other}` as a number"))),
        },
        other => Err(format_err(format!(
            "{what}: expected a number or inf string, found {other}"
        ))),
    }
}

fn coord_from_value(v: &toml::Value, what: &str) -> Result<CoordBound, IoError> {
    match v {
        toml::Value::Float(f) => Ok(CoordBound::Fixed(*f)),
        toml::Value::Integer(i) => Ok(CoordBound::Fixed(*i as f64)),
        toml::Value::String(s) if s.trim() == "free" => Ok(CoordBound::Free),
        toml::Value::String(s) => s
            .trim()
            .parse::<f64>()
            .map(CoordBound::Fixed)
            .map_err(|_| format_err(format!("{what}: `{s}` is neither `free` nor a number"))),
        toml::Value::Array(items) if items.len() == 2 => {
            let lo = bound_endpoint(&items[0], what)?;
            let hi = bound_endpoint(&items[1], what)?;
            Ok(CoordBound::Interval { lo, hi })
        }
        other => Err(format_err(format!(
            "{what}: expected a number, `free`, or a [lo, hi] pair, found {other}"
        ))),
    }
}

fn coord_to_value(c: &CoordBound) -> toml::Value {
    fn endpoint(v: f64) -> toml::Value {
        if v == f64::INFINITY {
            toml::Value::String("inf".into())
        } else if v == f64::NEG_INFINITY {
            toml::Value::String("-inf".into())
        } else {
            toml::Value::Float(v)
        }
    }
    match c {
        CoordBound::Fixed(v) => toml::Value::Float(*v),
        CoordBound::Free => toml::Value::String("free".into()),
        CoordBound::Interval { lo, hi } => toml::Value::Array(vec![endpoint(*lo), endpoint(*hi)]),
    }
}

fn parse_expr(src: &str, names: &[String], what: &str) -> Result<Expr, IoError> {
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    Expr::parse(src, &refs).map_err(|e| format_err(format!("{what}: {e}")))
}

fn cone_from_doc(doc: &ConeDoc, m: usize) -> Result<ControlCone, IoError> {
    match doc.kind.as_str() {
        "full" => {
            let dim = doc.dim.unwrap_or(m);
            if dim != m {
                return Err(format_err(format!(
                    "cone: dim {dim} does not match m = {m}"
                )));
            }
            Ok(ControlCone::Full { dim })
        }
        "orthant" => {
            let tags = doc
                .tags
                .as_ref()
                .ok_or_else(|| format_err("cone: orthant kind needs a `tags` list"))?;
            if tags.len() != m {
                return Err(format_err(format!(
                    "cone: {} tags for m = {m} axes",
                    tags.len()
                )));
            }
            let tags = tags
                .iter()
                .map(|t| match t.as_str() {
                    "free" => Ok(AxisTag::Free),
                    "nonneg" => Ok(AxisTag::NonNeg),
                    "nonpos" => Ok(AxisTag::NonPos),
                    "zero" => Ok(AxisTag::Zero),
                    other => Err(format_err(format!(
                        "cone: unknown axis tag `{other}` (use free/nonneg/nonpos/zero)"
                    ))),
                })
                .collect::<Result<Vec<AxisTag>, IoError>>()?;
            Ok(ControlCone::Orthant { tags })
        }
        "generated" => {
            let generators = doc
                .generators
                .as_ref()
                .ok_or_else(|| format_err("cone: generated kind needs a `generators` list"))?;
            for (i, g) in generators.iter().enumerate() {
                if g.len() != m {
                    return Err(format_err(format!(
                        "cone: generator {i} has {} entries, expected m = {m}",
                        g.len()
                    )));
                }
            }
            Ok(ControlCone::Generated {
                dim: m,
                generators: generators.clone(),
            })
        }
        other => Err(format_err(format!(
            "cone: unknown kind `{other}` (use full/orthant/generated)"
        ))),
    }
}

fn cone_to_doc(cone: &ControlCone) -> ConeDoc {
    match cone {
        ControlCone::Full { dim } => ConeDoc {
            kind: "full".into(),
            tags: None,
            dim: Some(*dim),
            generators: None,
        },
        ControlCone::Orthant { tags } => ConeDoc {
            kind: "orthant".into(),
            tags: Some(
                tags.iter()
                    .map(|t| {
                        match t {
                            AxisTag::Free => "free",
                            AxisTag::NonNeg => "nonneg",
                            AxisTag::NonPos => "nonpos",
                            AxisTag::Zero => "zero",
                        }
                        .to_string()
                    })
                    .collect(),
            ),
            dim: None,
            generators: None,
        },
        ControlCone::Generated { generators, .. } => ConeDoc {
            kind: "generated".into(),
            tags: None,
            dim: None,
            generators: Some(generators.clone()),
        },
    }
}

/// Parses a problem document from TOML text.
pub fn problem_from_str(text: &str) -> Result<ProblemSpec, IoError> {
    let doc: ProblemDoc = toml::from_str(text)?;
    let (n, m) = (doc.n, doc.m);
    if doc.f.len() != n {
        return Err(format_err(format!(
            "f: {} expressions for n = {n} states",
            doc.f.len()
        )));
    }
    if doc.g.len() != m {
        return Err(format_err(format!(
            "g: {} columns for m = {m} controls",
            doc.g.len()
        )));
    }
    for (j, col) in doc.g.iter().enumerate() {
        if col.len() != n {
            return Err(format_err(format!(
                "g[{j}]: {} expressions for n = {n} states",
                col.len()
            )));
        }
    }
    if doc.target.x1.len() != n || doc.target.x2.len() != n {
        return Err(format_err(format!(
            "target: x1 has {} and x2 has {} entries, expected n = {n}",
            doc.target.x1.len(),
            doc.target.x2.len()
        )));
    }
    let field_names = field_var_names(n);
    let cost_names = cost_var_names(n);
    let f = doc
        .f
        .iter()
        .enumerate()
        .map(|(i, src)| parse_expr(src, &field_names, &format!("f[{i}]")))
        .collect::<Result<Vec<Expr>, IoError>>()?;
    let g = doc
        .g
        .iter()
        .enumerate()
        .map(|(j, col)| {
            col.iter()
                .enumerate()
                .map(|(i, src)| parse_expr(src, &field_names, &format!("g[{j}][{i}]")))
                .collect::<Result<Vec<Expr>, IoError>>()
        })
        .collect::<Result<Vec<Vec<Expr>>, IoError>>()?;
    let cost = parse_expr(&doc.cost, &cost_names, "cost")?;
    let mut coords = Vec::with_capacity(2 + 2 * n);
    coords.push(coord_from_value(&doc.target.t1, "target.t1")?);
    for (i, v) in doc.target.x1.iter().enumerate() {
        coords.push(coord_from_value(v, &format!("target.x1[{i}]"))?);
    }
    coords.push(coord_from_value(&doc.target.t2, "target.t2")?);
    for (i, v) in doc.target.x2.iter().enumerate() {
        coords.push(coord_from_value(v, &format!("target.x2[{i}]"))?);
    }
    let halfspaces = doc
        .target
        .halfspaces
        .iter()
        .enumerate()
        .map(|(i, h)| {
            if h.a.len() != 2 + 2 * n {
                Err(format_err(format!(
                    "target.halfspaces[{i}]: a has {} entries, expected {}",
                    h.a.len(),
                    2 + 2 * n
                )))
            } else {
                Ok(Halfspace {
                    a: h.a.clone(),
                    b: h.b,
                })
            }
        })
        .collect::<Result<Vec<Halfspace>, IoError>>()?;
    Ok(ProblemSpec {
        fields: VectorFieldSet { n, m, f, g },
        cone: cone_from_doc(&doc.cone, m)?,
        target: TargetSpec {
            coords,
            halfspaces,
            epigraph_declared: doc.target.epigraph,
        },
        cost: CostSpec { h: cost },
        k: doc.k.unwrap_or(f64::INFINITY),
    })
}

/// Renders a problem as TOML text that parses back to the same problem.
pub fn problem_to_string(p: &ProblemSpec) -> Result<String, IoError> {
    let n = p.fields.n;
    let doc = ProblemDoc {
        n,
        m: p.fields.m,
        f: p.fields.f.iter().map(|e| e.to_string()).collect(),
        g: p
            .fields
            .g
            .iter()
            .map(|col| col.iter().map(|e| e.to_string()).collect())
            .collect(),
        cost: p.cost.h.to_string(),
        k: p.k.is_finite().then_some(p.k),
        cone: cone_to_doc(&p.cone),
        target: TargetDoc {
            t1: coord_to_value(&p.target.coords[0]),
            x1: p.target.coords[1..1 + n].iter().map(coord_to_value).collect(),
            t2: coord_to_value(&p.target.coords[1 + n]),
            x2: p.target.coords[2 + n..].iter().map(coord_to_value).collect(),
            epigraph: p.target.epigraph_declared,
            halfspaces: p
                .target
                .halfspaces
                .iter()
                .map(|h| HalfspaceDoc {
                    a: h.a.clone(),
                    b: h.b,
                })
                .collect(),
        },
    };
    Ok(toml::to_string_pretty(&doc)?)
}

/// Loads a problem document from a file.
pub fn load_problem(path: &Path) -> Result<ProblemSpec, IoError> {
    problem_from_str(&fs::read_to_string(path)?)
}

/// Saves a problem document to a file.
pub fn save_problem(p: &ProblemSpec, path: &Path) -> Result<(), IoError> {
    fs::write(path, problem_to_string(p)?)?;
    Ok(())
}

fn parse_cell(cell: &str, row: usize, col: &str) -> Result<f64, IoError> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| format_err(format!("row {row}: cannot read `{cell}` in column {col}")))
}

/// Writes an extended process as CSV: `s, y0, y_1.., nu, w0, w_1..` with
/// controls on the left node of their interval and empty control cells on
/// the final row.
pub fn write_extended_csv<W: Write>(ep: &ExtendedProcess, out: W) -> Result<(), IoError> {
    let n = ep.y.first().map_or(0, |row| row.len());
    let m = ep.w.first().map_or(0, |row| row.len());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["s".to_string(), "y0".to_string()];
    header.extend((1..=n).map(|i| format!("y_{i}")));
    header.push("nu".to_string());
    header.push("w0".to_string());
    header.extend((1..=m).map(|j| format!("w_{j}")));
    wtr.write_record(&header)?;
    let last = ep.grid.len() - 1;
    for k in 0..=last {
        let mut row = vec![ep.grid[k].to_string(), ep.y0[k].to_string()];
        row.extend(ep.y[k].iter().map(|v| v.to_string()));
        row.push(ep.nu[k].to_string());
        if k < last {
            row.push(ep.w0[k].to_string());
            row.extend(ep.w[k].iter().map(|v| v.to_string()));
        } else {
            row.extend(std::iter::repeat(String::new()).take(1 + m));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads an extended process from the CSV layout of [`write_extended_csv`].
pub fn read_extended_csv<R: Read>(input: R) -> Result<ExtendedProcess, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"s") || cols.get(1) != Some(&"y0") {
        return Err(format_err("extended csv must start with columns s, y0"));
    }
    let n = cols.iter().filter(|c| c.starts_with("y_")).count();
    let m = cols.iter().filter(|c| c.starts_with("w_")).count();
    let expected = 4 + n + m;
    if cols.len() != expected {
        return Err(format_err(format!(
            "extended csv has {} columns, expected {expected} for n = {n}, m = {m}",
            cols.len()
        )));
    }
    let mut grid = Vec::new();
    let mut y0 = Vec::new();
    let mut y = Vec::new();
    let mut nu = Vec::new();
    let mut w0 = Vec::new();
    let mut w = Vec::new();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
    if records.len() < 2 {
        return Err(format_err("extended csv needs at least two node rows"));
    }
    let last = records.len() - 1;
    for (k, rec) in records.iter().enumerate() {
        if rec.len() != expected {
            return Err(format_err(format!(
                "row {k}: {} cells, expected {expected}",
                rec.len()
            )));
        }
        grid.push(parse_cell(&rec[0], k, "s")?);
        y0.push(parse_cell(&rec[1], k, "y0")?);
        let mut yr = Vec::with_capacity(n);
        for i in 0..n {
            yr.push(parse_cell(&rec[2 + i], k, &format!("y_{}", i + 1))?);
        }
        y.push(yr);
        nu.push(parse_cell(&rec[2 + n], k, "nu")?);
        let all_empty = rec.iter().skip(3 + n).all(|c| c.trim().is_empty());
        if k == last {
            if !all_empty {
                return Err(format_err(
                    "final row must leave the control cells empty; controls sit on left nodes",
                ));
            }
        } else {
            w0.push(parse_cell(&rec[3 + n], k, "w0")?);
            let mut wr = Vec::with_capacity(m);
            for j in 0..m {
                wr.push(parse_cell(&rec[4 + n + j], k, &format!("w_{}", j + 1))?);
            }
            w.push(wr);
        }
    }
    Ok(ExtendedProcess {
        grid,
        y0,
        y,
        nu,
        w0,
        w,
    })
}

/// Writes a strict process as CSV: `t, x_1.., v, du_1..` with control
/// derivatives on the left node and empty cells on the final row. The
/// primitive control `u` is not stored; readers rebuild it from zero.
pub fn write_strict_csv<W: Write>(sp: &StrictProcess, out: W) -> Result<(), IoError> {
    let n = sp.x.first().map_or(0, |row| row.len());
    let m = sp.du.first().map_or(0, |row| row.len());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.push("v".to_string());
    header.extend((1..=m).map(|j| format!("du_{j}")));
    wtr.write_record(&header)?;
    let last = sp.grid.len() - 1;
    for k in 0..=last {
        let mut row = vec![sp.grid[k].to_string()];
        row.extend(sp.x[k].iter().map(|v| v.to_string()));
        row.push(sp.v[k].to_string());
        if k < last {
            row.extend(sp.du[k].iter().map(|v| v.to_string()));
        } else {
            row.extend(std::iter::repeat(String::new()).take(m));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a strict process from the CSV layout of [`write_strict_csv`],
/// rebuilding the primitive control from zero by integrating the stored
/// derivatives.
pub fn read_strict_csv<R: Read>(input: R) -> Result<StrictProcess, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"t") {
        return Err(format_err("strict csv must start with column t"));
    }
    let n = cols.iter().filter(|c| c.starts_with("x_")).count();
    let m = cols.iter().filter(|c| c.starts_with("du_")).count();
    let expected = 2 + n + m;
    if cols.len() != expected {
        return Err(format_err(format!(
            "strict csv has {} columns, expected {expected} for n = {n}, m = {m}",
            cols.len()
        )));
    }
    let mut grid = Vec::new();
    let mut x = Vec::new();
    let mut v = Vec::new();
    let mut du = Vec::new();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
    if records.len() < 2 {
        return Err(format_err("strict csv needs at least two node rows"));
    }
    let last = records.len() - 1;
    for (k, rec) in records.iter().enumerate() {
        if rec.len() != expected {
            return Err(format_err(format!(
                "row {k}: {} cells, expected {expected}",
                rec.len()
            )));
        }
        grid.push(parse_cell(&rec[0], k, "t")?);
        let mut xr = Vec::with_capacity(n);
        for i in 0..n {
            xr.push(parse_cell(&rec[1 + i], k, &format!("x_{}", i + 1))?);
        }
        x.push(xr);
        v.push(parse_cell(&rec[1 + n], k, "v")?);
        let all_empty = rec.iter().skip(2 + n).all(|c| c.trim().is_empty());
        if k == last {
            if !all_empty {
                return Err(format_err(
                    "final row must leave the control cells empty; controls sit on left nodes",
                ));
            }
        } else {
            let mut dr = Vec::with_capacity(m);
            for j in 0..m {
                dr.push(parse_cell(&rec[2 + n + j], k, &format!("du_{}", j + 1))?);
            }
            du.push(dr);
        }
    }
    let mut u = vec![vec![0.0; m]];
    for k in 0..du.len() {
        let dt = grid[k + 1] - grid[k];
        let prev = u[k].clone();
        u.push(
            prev.iter()
                .zip(&du[k])
                .map(|(ui, di)| ui + di * dt)
                .collect(),
        );
    }
    Ok(StrictProcess { grid, x, v, u, du })
}

#[derive(Debug, Serialize, Deserialize)]
struct MultiplierDoc {
    lambda: f64,
    pi: f64,
    p0: Vec<f64>,
    p: Vec<Vec<f64>>,
}

/// Renders a multiplier set as TOML text.
pub fn multipliers_to_string(ms: &MultiplierSet) -> Result<String, IoError> {
    let doc = MultiplierDoc {
        lambda: ms.lambda,
        pi: ms.pi,
        p0: ms.path.p0.clone(),
        p: ms.path.p.clone(),
    };
    Ok(toml::to_string_pretty(&doc)?)
}

/// Parses a multiplier set from TOML text.
pub fn multipliers_from_str(text: &str) -> Result<MultiplierSet, IoError> {
    let doc: MultiplierDoc = toml::from_str(text)?;
    if doc.p0.len() != doc.p.len() {
        return Err(format_err(format!(
            "multipliers: p0 has {} nodes but p has {}",
            doc.p0.len(),
            doc.p.len()
        )));
    }
    let width = doc.p.first().map_or(0, |row| row.len());
    if doc.p.iter().any(|row| row.len() != width) {
        return Err(format_err("multipliers: ragged rows in p"));
    }
    Ok(MultiplierSet {
        path: crate::dynamics::AdjointPath {
            p0: doc.p0,
            p: doc.p,
        },
        pi: doc.pi,
        lambda: doc.lambda,
    })
}

/// Loads a multiplier set from a file.
pub fn load_multipliers(path: &Path) -> Result<MultiplierSet, IoError> {
    multipliers_from_str(&fs::read_to_string(path)?)
}

/// Saves a multiplier set to a file.
pub fn save_multipliers(ms: &MultiplierSet, path: &Path) -> Result<(), IoError> {
    fs::write(path, multipliers_to_string(ms)?)?;
    Ok(())
}
