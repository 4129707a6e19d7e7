//! CSV and JSON writers.
//!
//! Floats are written in Rust's shortest round-trip form, so rereading a
//! file gives back the exact values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hinf_core::exact_pi::PiTrace;
use hinf_core::robust::{IssEnvelope, IssReport};
use hinf_core::simulate::{ClosedLoopStats, DataMoments};
use nalgebra::DMatrix;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, OutputError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err(path))
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn labels(prefix: &str, rows: usize, cols: usize) -> impl Iterator<Item = String> + '_ {
    (0..rows).flat_map(move |i| (0..cols).map(move |j| format!("{prefix}_{}_{}", i + 1, j + 1)))
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = String> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| num(m[(i, j)])))
}

/// One row per evaluation: indices, step, residual, abscissa, condition
/// number, then `P`, `Lu`, `Lv` row-major. Missing values are empty.
pub fn write_trace(path: &Path, trace: &PiTrace) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    let first = trace.records.first();
    let (n, m1, m2) = first.map_or((0, 0, 0), |r| (r.p.nrows(), r.lu.nrows(), r.lv.nrows()));
    let mut header: Vec<String> = ["outer", "inner", "step", "residual", "abscissa", "condition"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(labels("p", n, n));
    header.extend(labels("lu", m1, n));
    header.extend(labels("lv", m2, n));
    w.write_record(&header).map_err(csv_err(path))?;
    for r in &trace.records {
        let mut row = vec![
            r.outer.to_string(),
            r.inner.to_string(),
            opt(r.step),
            num(r.residual),
            opt(r.abscissa),
            opt(r.condition),
        ];
        row.extend(row_major(&r.p));
        row.extend(row_major(&r.lu));
        row.extend(row_major(&r.lv));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

const MOMENT_BLOCKS: [&str; 5] = ["endpoint_means", "delta_uu", "i_xx", "i_xu", "i_xv"];

/// Dump of the data moments: a header `n,m1,m2,N`, its values, then one
/// row per block row as `block,row,values...`.
pub fn write_moments(path: &Path, data: &DataMoments) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    let (n, m1, m2) = data.dims();
    w.write_record(["n", "m1", "m2", "N"]).map_err(csv_err(path))?;
    w.write_record([n, m1, m2, data.intervals()].map(|v| v.to_string()))
        .map_err(csv_err(path))?;
    let blocks = [
        data.endpoint_means(),
        data.delta_uu(),
        data.i_xx(),
        data.i_xu(),
        data.i_xv(),
    ];
    for (name, m) in MOMENT_BLOCKS.iter().zip(blocks) {
        for i in 0..m.nrows() {
            let mut row = vec![name.to_string(), i.to_string()];
            row.extend(m.row(i).iter().map(|v| num(*v)));
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io(path))
}

pub fn read_moments(path: &Path) -> Result<DataMoments, OutputError> {
    let bad = |message: String| OutputError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err(path))?;
    let mut records = r.records();
    let dims_rec = records
        .next()
        .ok_or_else(|| bad("missing dimension row".into()))?
        .map_err(csv_err(path))?;
    let dims: Vec<usize> = dims_rec
        .iter()
        .map(|s| s.parse().map_err(|_| bad(format!("bad dimension {s:?}"))))
        .collect::<Result<_, _>>()?;
    let [n, m1, m2, big_n] = dims[..] else {
        return Err(bad("dimension row must have four entries".into()));
    };
    let sym = |k: usize| k * (k + 1) / 2;
    let shapes = [
        (big_n + 1, sym(n)),
        (big_n, sym(m1)),
        (big_n, n * n),
        (big_n, n * m1),
        (big_n, n * m2),
    ];
    let mut blocks: Vec<DMatrix<f64>> = shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect();
    let mut filled: Vec<Vec<bool>> = shapes.iter().map(|&(r, _)| vec![false; r]).collect();
    for rec in records {
        let rec = rec.map_err(csv_err(path))?;
        let name = rec.get(0).unwrap_or_default();
        let b = MOMENT_BLOCKS
            .iter()
            .position(|m| *m == name)
            .ok_or_else(|| bad(format!("unknown block {name:?}")))?;
        let i: usize = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad row index in {name}")))?;
        let (rows, cols) = shapes[b];
        if i >= rows || rec.len() != cols + 2 {
            return Err(bad(format!("{name} row {i} does not fit {rows}x{cols}")));
        }
        for j in 0..cols {
            blocks[b][(i, j)] = rec[j + 2]
                .parse()
                .map_err(|_| bad(format!("bad number in {name} row {i}")))?;
        }
        filled[b][i] = true;
    }
    if let Some(b) = filled.iter().position(|f| f.iter().any(|x| !x)) {
        return Err(bad(format!("block {} is incomplete", MOMENT_BLOCKS[b])));
    }
    let mut it = blocks.into_iter();
    let mut next = || it.next().expect("five blocks");
    DataMoments::new((n, m1, m2), next(), next(), next(), next(), next())
        .map_err(|e| bad(e.to_string()))
}

/// Per-evaluation errors of each disturbed run.
pub fn write_iss(path: &Path, reports: &[IssReport]) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    w.write_record(["magnitude", "seed", "evaluation", "error", "stabilizer_ok"])
        .map_err(csv_err(path))?;
    for r in reports {
        for (t, (e, ok)) in r.errors.iter().zip(&r.stabilizer_ok).enumerate() {
            w.write_record([
                num(r.magnitude),
                r.seed.to_string(),
                t.to_string(),
                num(*e),
                ok.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io(path))
}

/// Per-outer-iteration quantities of each disturbed run.
pub fn write_iss_outer(path: &Path, reports: &[IssReport]) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    w.write_record(["magnitude", "seed", "outer", "trace_gap", "lv_error"])
        .map_err(csv_err(path))?;
    for r in reports {
        for (k, (g, l)) in r.trace_gaps.iter().zip(&r.lv_errors).enumerate() {
            w.write_record([num(r.magnitude), r.seed.to_string(), k.to_string(), num(*g), num(*l)])
                .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io(path))
}

pub fn write_envelope(path: &Path, env: &IssEnvelope) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    w.write_record(["magnitude", "max_final_error", "runs", "diverged"])
        .map_err(csv_err(path))?;
    for r in &env.rows {
        w.write_record([
            num(r.magnitude),
            num(r.max_final_error),
            r.runs.to_string(),
            r.diverged.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn write_closed_loop(path: &Path, stats: &ClosedLoopStats) -> Result<(), OutputError> {
    let mut w = writer(path)?;
    w.write_record(["t", "mean_square"]).map_err(csv_err(path))?;
    for (t, v) in stats.times.iter().zip(&stats.mean_square) {
        w.write_record([num(*t), num(*v)]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), OutputError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    let mut f = fs::File::create(path).map_err(io(path))?;
    f.write_all(text.as_bytes()).map_err(io(path))
}
