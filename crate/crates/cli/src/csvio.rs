//! Trajectory serialization: CSV with a fixed column layout and a JSON
//! mirror. Values are written with 17 significant digits, so parsing the
//! emitted text reproduces every f64 bit for bit.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use linflow::model::{RunEnd, Sample, Trajectory, TrajectoryMeta};

use crate::CliError;

/// Header for a trajectory over a `d_y x d_x` target.
pub fn csv_header(d_y: usize, d_x: usize) -> String {
    let mut h = String::from("t,s,q,q1,loss,bal_residual");
    for i in 1..=d_y {
        write!(h, ",a_{i}").expect("string write");
    }
    for i in 1..=d_x {
        write!(h, ",b_{i}").expect("string write");
    }
    h
}

fn dims(traj: &Trajectory<f64>) -> Option<(usize, usize)> {
    traj.samples.first().map(|s| (s.a.len(), s.b.len()))
}

/// Renders a trajectory as CSV. An empty trajectory yields the header only,
/// with the dimensions supplied by the caller.
pub fn emit_csv(traj: &Trajectory<f64>, empty_dims: (usize, usize)) -> String {
    let (d_y, d_x) = dims(traj).unwrap_or(empty_dims);
    let mut out = csv_header(d_y, d_x);
    out.push('\n');
    for s in &traj.samples {
        write!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            s.t, s.s, s.q, s.q1, s.loss, s.bal_residual
        )
        .expect("string write");
        for x in s.a.iter().chain(s.b.iter()) {
            write!(out, ",{x:.16e}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Parses CSV produced by [`emit_csv`]. The run-end marker is not part of
/// the file, so the metadata reports an external origin.
pub fn parse_csv(text: &str) -> Result<Trajectory<f64>, CliError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::Format("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 7 || cols[..6] != ["t", "s", "q", "q1", "loss", "bal_residual"] {
        return Err(CliError::Format("unrecognized trajectory header".into()));
    }
    let d_y = cols[6..].iter().take_while(|c| c.starts_with("a_")).count();
    let d_x = cols[6 + d_y..].iter().take_while(|c| c.starts_with("b_")).count();
    if 6 + d_y + d_x != cols.len() || d_y == 0 || d_x == 0 {
        return Err(CliError::Format("unrecognized trajectory header".into()));
    }

    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Format(format!("line {}: {e}", lineno + 2)))?;
        if fields.len() != cols.len() {
            return Err(CliError::Format(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        samples.push(Sample {
            t: fields[0],
            s: fields[1],
            q: fields[2],
            q1: fields[3],
            loss: fields[4],
            bal_residual: fields[5],
            a: DVector::from_row_slice(&fields[6..6 + d_y]),
            b: DVector::from_row_slice(&fields[6 + d_y..]),
        });
    }
    let steps = samples.len();
    Ok(Trajectory {
        samples,
        meta: TrajectoryMeta { end: RunEnd::External, steps, max_tangency: 0.0, depth: 0 },
    })
}

// ---------------------------------------------------------------------------
// JSON mirror
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryJson {
    pub end: RunEnd,
    pub steps: usize,
    pub max_tangency: f64,
    pub depth: usize,
    pub samples: Vec<SampleJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleJson {
    pub t: f64,
    pub s: f64,
    pub q: f64,
    pub q1: f64,
    pub loss: f64,
    pub bal_residual: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl TrajectoryJson {
    pub fn from_trajectory(traj: &Trajectory<f64>) -> Self {
        Self {
            end: traj.meta.end,
            steps: traj.meta.steps,
            max_tangency: traj.meta.max_tangency,
            depth: traj.meta.depth,
            samples: traj
                .samples
                .iter()
                .map(|s| SampleJson {
                    t: s.t,
                    s: s.s,
                    q: s.q,
                    q1: s.q1,
                    loss: s.loss,
                    bal_residual: s.bal_residual,
                    a: s.a.iter().copied().collect(),
                    b: s.b.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn into_trajectory(self) -> Trajectory<f64> {
        Trajectory {
            meta: TrajectoryMeta {
                end: self.end,
                steps: self.steps,
                max_tangency: self.max_tangency,
                depth: self.depth,
            },
            samples: self
                .samples
                .into_iter()
                .map(|s| Sample {
                    t: s.t,
                    s: s.s,
                    q: s.q,
                    q1: s.q1,
                    loss: s.loss,
                    bal_residual: s.bal_residual,
                    a: DVector::from_vec(s.a),
                    b: DVector::from_vec(s.b),
                })
                .collect(),
        }
    }
}

/// Reads a trajectory file, dispatching on the extension (`.json` or CSV).
pub fn read_trajectory(path: &std::path::Path) -> Result<Trajectory<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let json: TrajectoryJson =
            serde_json::from_str(&text).map_err(|e| CliError::Format(e.to_string()))?;
        Ok(json.into_trajectory())
    } else {
        parse_csv(&text)
    }
}
