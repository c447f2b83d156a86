//! Prediction file format: one JSON object per scenario, carrying the
//! object-type pair, the joint confidence grid, and both agents' marginal
//! trajectories and confidences.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{ObjectType, Trajectory, Vec2};

use super::{JointConfidenceGrid, JointPrediction, MarginalPrediction};

#[derive(Serialize, Deserialize)]
struct PredictionWire {
    types: [String; 2],
    grid: Vec<Vec<f64>>,
    conf0: Vec<f64>,
    traj0: Vec<Vec<[f64; 2]>>,
    conf1: Vec<f64>,
    traj1: Vec<Vec<[f64; 2]>>,
}

fn traj_to_wire(t: &Trajectory) -> Vec<[f64; 2]> {
    t.points.iter().map(|p| [p.x, p.y]).collect()
}

fn traj_from_wire(w: Vec<[f64; 2]>) -> Result<Trajectory> {
    Trajectory::from_points(w.into_iter().map(|[x, y]| Vec2::new(x, y)).collect())
}

/// Write predictions as JSONL, aligned with the scenario file they came from.
pub fn save_predictions(
    path: impl AsRef<Path>,
    predictions: &[(ObjectType, ObjectType, JointPrediction)],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (t0, t1, p) in predictions {
        let k = p.grid.k;
        let wire = PredictionWire {
            types: [t0.name().to_string(), t1.name().to_string()],
            grid: (0..k)
                .map(|i| p.grid.p[i * k..(i + 1) * k].to_vec())
                .collect(),
            conf0: p.marginal0.confidences.clone(),
            traj0: p.marginal0.trajectories.iter().map(traj_to_wire).collect(),
            conf1: p.marginal1.confidences.clone(),
            traj1: p.marginal1.trajectories.iter().map(traj_to_wire).collect(),
        };
        serde_json::to_writer(&mut w, &wire).map_err(|e| Error::Parse { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(
    path: impl AsRef<Path>,
) -> Result<Vec<(ObjectType, ObjectType, JointPrediction)>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: PredictionWire = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            source: e,
        })?;
        let k = wire.grid.len();
        let mut p = Vec::with_capacity(k * k);
        for row in &wire.grid {
            if row.len() != k {
                return Err(Error::InvariantAt {
                    line: line_no,
                    field: "grid".to_string(),
                    detail: format!("row length {} in a {k}-row grid", row.len()),
                });
            }
            p.extend_from_slice(row);
        }
        let types: Vec<ObjectType> = wire
            .types
            .iter()
            .map(|s| {
                ObjectType::from_name(s).ok_or_else(|| Error::InvariantAt {
                    line: line_no,
                    field: "types".to_string(),
                    detail: format!("unknown object type {s:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let prediction = JointPrediction {
            grid: JointConfidenceGrid::new(k, p)?,
            marginal0: MarginalPrediction {
                confidences: wire.conf0,
                trajectories: wire
                    .traj0
                    .into_iter()
                    .map(traj_from_wire)
                    .collect::<Result<_>>()?,
            },
            marginal1: MarginalPrediction {
                confidences: wire.conf1,
                trajectories: wire
                    .traj1
                    .into_iter()
                    .map(traj_from_wire)
                    .collect::<Result<_>>()?,
            },
        };
        out.push((types[0], types[1], prediction));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.jsonl");
        let traj = |d: f64| {
            Trajectory::from_points(
                (0..crate::scenario::TRAJ_LEN)
                    .map(|t| Vec2::new(t as f64 * 0.7 + d, d - 0.3))
                    .collect(),
            )
            .unwrap()
        };
        let pred = JointPrediction {
            grid: JointConfidenceGrid::new(2, vec![0.4, 0.3, 0.2, 0.1]).unwrap(),
            marginal0: MarginalPrediction {
                trajectories: vec![traj(0.0), traj(1.0)],
                confidences: vec![0.25, 0.75],
            },
            marginal1: MarginalPrediction {
                trajectories: vec![traj(2.0), traj(3.0)],
                confidences: vec![0.5, 0.5],
            },
        };
        let rows = vec![(ObjectType::Vehicle, ObjectType::Cyclist, pred)];
        save_predictions(&path, &rows).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].0, ObjectType::Vehicle);
        assert_eq!(loaded[0].1, ObjectType::Cyclist);
        assert_eq!(loaded[0].2, rows[0].2);
    }
}
