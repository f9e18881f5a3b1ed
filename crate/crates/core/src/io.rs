//! File formats: trajectory, benchmark and moment CSVs, and the dataset manifest.
//!
//! Floats are written with Rust's shortest round-trip formatting, so identical runs produce
//! byte-identical files and values survive a write/read cycle exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Trajectory;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{context}: line {line}: {message}")]
    Parse { context: String, line: u64, message: String },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },
}

impl IoError {
    pub fn parse(context: &str, line: u64, message: impl Into<String>) -> Self {
        IoError::Parse {
            context: context.to_string(),
            line,
            message: message.into(),
        }
    }
}

pub fn read_file(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        context: path.display().to_string(),
        source,
    })
}

pub const TRAJECTORY_HEADER: [&str; 7] = ["trial_id", "step", "time_s", "link_index", "x_m", "y_m", "theta_rad"];

/// Appends one trajectory's snapshots; call [`trajectory_writer`] first for the header.
pub fn write_trajectory<W: Write>(w: &mut csv::Writer<W>, trial_id: usize, traj: &Trajectory) -> Result<(), IoError> {
    for ((state, &step), &time) in traj.states.iter().zip(&traj.steps).zip(&traj.times) {
        for (link, q) in state.q[..state.n].iter().enumerate() {
            w.write_record([
                trial_id.to_string(),
                step.to_string(),
                time.to_string(),
                link.to_string(),
                q[0].to_string(),
                q[1].to_string(),
                q[2].to_string(),
            ])?;
        }
    }
    Ok(())
}

pub fn trajectory_writer<W: Write>(inner: W) -> Result<csv::Writer<W>, IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
    w.write_record(TRAJECTORY_HEADER)?;
    Ok(w)
}

/// One observed frame: link poses in index order. `theta` is `None` when the column is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub step: usize,
    pub time: f64,
    pub xy: Vec<[f64; 2]>,
    pub theta: Option<Vec<f64>>,
}

impl Frame {
    pub fn n(&self) -> usize {
        self.xy.len()
    }
}

/// Reads a trajectory CSV into frames per trial id (both sorted ascending).
pub fn read_trajectory<R: Read>(reader: R, context: &str) -> Result<BTreeMap<usize, Vec<Frame>>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::parse(context, 1, format!("missing column `{name}`")))
    };
    let idx: Vec<usize> = TRAJECTORY_HEADER.iter().map(|h| col(h)).collect::<Result<_, _>>()?;
    // (trial, step) -> (time, link -> (x, y, theta))
    type Rows = BTreeMap<usize, (f64, BTreeMap<usize, (f64, f64, Option<f64>)>)>;
    let mut trials: BTreeMap<usize, Rows> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let int = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|_| IoError::parse(context, line, format!("`{}` is not a non-negative integer", TRAJECTORY_HEADER[i])))
        };
        let float = |i: usize| {
            let v = field(i)
                .parse::<f64>()
                .map_err(|_| IoError::parse(context, line, format!("`{}` is not a number", TRAJECTORY_HEADER[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(IoError::parse(context, line, format!("`{}` is not finite", TRAJECTORY_HEADER[i])))
            }
        };
        let (trial, step, time, link, x, y) = (int(0)?, int(1)?, float(2)?, int(3)?, float(4)?, float(5)?);
        let theta = if field(6).is_empty() { None } else { Some(float(6)?) };
        let frame = trials.entry(trial).or_default().entry(step).or_insert((time, BTreeMap::new()));
        if frame.1.insert(link, (x, y, theta)).is_some() {
            return Err(IoError::parse(context, line, format!("duplicate link {link} in trial {trial} step {step}")));
        }
    }
    let mut out = BTreeMap::new();
    for (trial, steps) in trials {
        let mut frames = Vec::with_capacity(steps.len());
        for (step, (time, links)) in steps {
            let n = links.len();
            if links.keys().copied().ne(0..n) {
                return Err(IoError::parse(context, 0, format!("trial {trial} step {step}: link indices are not 0..{n}")));
            }
            let xy = links.values().map(|&(x, y, _)| [x, y]).collect();
            let theta: Option<Vec<f64>> = links.values().map(|&(_, _, t)| t).collect();
            frames.push(Frame { step, time, xy, theta });
        }
        out.insert(trial, frames);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub max_links: usize,
    pub batch: usize,
    pub mean_ms_per_iteration: f64,
    pub ms_per_iteration_per_element: f64,
}

pub fn write_bench<W: Write>(inner: W, rows: &[BenchRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(inner);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: "bench csv".into(),
        source,
    })?;
    Ok(())
}

pub fn read_bench<R: Read>(reader: R) -> Result<Vec<BenchRow>, IoError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(IoError::from)
}

/// One bending-moment measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRecord {
    pub pressure_pa: f64,
    pub theta_rad: f64,
    pub moment_nm: f64,
}

pub fn read_moments<R: Read>(reader: R, context: &str) -> Result<Vec<MomentRecord>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<MomentRecord>() {
        match rec {
            Ok(r) => {
                if ![r.pressure_pa, r.theta_rad, r.moment_nm].iter().all(|v| v.is_finite()) {
                    return Err(IoError::parse(context, out.len() as u64 + 2, "non-finite value"));
                }
                out.push(r)
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(IoError::parse(context, line, e.to_string()));
            }
        }
    }
    Ok(out)
}

pub fn write_moments<W: Write>(inner: W, records: &[MomentRecord]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(inner);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: "moment csv".into(),
        source,
    })?;
    Ok(())
}

/// Dataset manifest entry for one tracked trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    /// Trajectory CSV, relative to the manifest.
    pub csv: PathBuf,
    /// Trial id inside the CSV.
    pub trial_id: usize,
    /// Scene JSON, relative to the manifest.
    pub scene: PathBuf,
    pub frame_interval_s: f64,
    pub d_segment_m: f64,
    /// Held-out trials are excluded from fitting and scored afterwards.
    #[serde(default)]
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub trials: Vec<TrialEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, manifest_path: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_round_trip() {
        let text = "trial_id,step,time_s,link_index,x_m,y_m,theta_rad\n\
                    0,0,0,0,0,0,0\n0,0,0,1,0.05,0,0.1\n0,1,0.01,0,0,0,0\n0,1,0.01,1,0.051,0.001,0.1\n\
                    3,0,0,1,1,1,\n3,0,0,0,0,0,\n";
        let t = read_trajectory(text.as_bytes(), "t").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[&0].len(), 2);
        assert_eq!(t[&0][1].xy[1], [0.051, 0.001]);
        assert_eq!(t[&0][1].theta, Some(vec![0.0, 0.1]));
        assert_eq!(t[&3][0].theta, None);
        assert_eq!(t[&3][0].xy, vec![[0.0, 0.0], [1.0, 1.0]]);
    }

    #[test]
    fn trajectory_errors_name_the_line() {
        let text = "trial_id,step,time_s,link_index,x_m,y_m,theta_rad\n0,0,0,0,abc,0,0\n";
        let err = read_trajectory(text.as_bytes(), "t.csv").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("x_m"), "{err}");
        let text = "trial_id,step,time_s,link_index,x_m,y_m\n";
        assert!(read_trajectory(text.as_bytes(), "t.csv").is_err());
        let text = "trial_id,step,time_s,link_index,x_m,y_m,theta_rad\n0,0,0,0,0,0,0\n0,0,0,2,0,0,0\n";
        assert!(read_trajectory(text.as_bytes(), "t.csv").is_err());
    }

    #[test]
    fn moments_round_trip() {
        let recs = vec![
            MomentRecord {
                pressure_pa: 1000.0,
                theta_rad: 0.1,
                moment_nm: 0.0123,
            },
            MomentRecord {
                pressure_pa: 2000.0,
                theta_rad: 0.2,
                moment_nm: 1.0 / 3.0,
            },
        ];
        let mut buf = Vec::new();
        write_moments(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("pressure_pa,theta_rad,moment_nm\n"));
        assert_eq!(read_moments(buf.as_slice(), "m").unwrap(), recs);
        assert!(read_moments("pressure_pa,theta_rad,moment_nm\n1,x,2\n".as_bytes(), "m").is_err());
    }

    #[test]
    fn bench_round_trip() {
        let rows = vec![BenchRow {
            max_links: 10,
            batch: 64,
            mean_ms_per_iteration: 12.8,
            ms_per_iteration_per_element: 0.2,
        }];
        let mut buf = Vec::new();
        write_bench(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("max_links,batch,mean_ms_per_iteration,ms_per_iteration_per_element\n"));
        assert_eq!(read_bench(buf.as_slice()).unwrap(), rows);
    }
}
