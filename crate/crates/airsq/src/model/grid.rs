//! Prediction containers: marginal per-anchor trajectories with confidences,
//! the K x K joint confidence grid, and the cartesian-product joint
//! prediction built from two marginals.

use crate::error::{Error, Result};
use crate::scenario::Trajectory;

/// K x K probability matrix over cartesian-product anchor pairs. Rows are
/// indexed by agent 0's anchor, columns by agent 1's anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfidenceGrid {
    pub k: usize,
    /// Row-major probabilities, length k*k.
    pub p: Vec<f64>,
}

impl JointConfidenceGrid {
    pub fn new(k: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != k * k {
            return Err(Error::ShapeMismatch(format!(
                "grid needs {} entries, got {}",
                k * k,
                p.len()
            )));
        }
        Ok(Self { k, p })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            k,
            p: vec![1.0 / (k * k) as f64; k * k],
        }
    }

    pub fn one_hot(k: usize, i: usize, j: usize) -> Self {
        let mut p = vec![0.0; k * k];
        p[i * k + j] = 1.0;
        Self { k, p }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.p[i * self.k + j] = v;
    }

    pub fn sum(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.p[i * self.k..(i + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn transposed(&self) -> Self {
        let mut p = vec![0.0; self.k * self.k];
        for i in 0..self.k {
            for j in 0..self.k {
                p[j * self.k + i] = self.get(i, j);
            }
        }
        Self { k: self.k, p }
    }

    /// Cells sorted by descending probability; ties break toward the lower
    /// flat index so ordering is deterministic.
    pub fn cells_by_confidence(&self) -> Vec<(usize, usize, f64)> {
        let mut cells: Vec<(usize, usize, f64)> = (0..self.k)
            .flat_map(|i| (0..self.k).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, self.get(i, j)))
            .collect();
        cells.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("grid probabilities are finite")
                .then((a.0 * self.k + a.1).cmp(&(b.0 * self.k + b.1)))
        });
        cells
    }
}

/// One agent's anchored prediction: K trajectories (world frame) with a
/// probability per anchor. Padded modes carry probability exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrediction {
    pub trajectories: Vec<Trajectory>,
    pub confidences: Vec<f64>,
}

impl MarginalPrediction {
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    /// Index of the most confident mode (ties to the lowest index).
    pub fn top_mode(&self) -> usize {
        let mut best = 0;
        let mut best_c = f64::NEG_INFINITY;
        for (i, &c) in self.confidences.iter().enumerate() {
            if c > best_c {
                best_c = c;
                best = i;
            }
        }
        best
    }
}

/// Joint prediction over the product anchor space. Cell (i, j) pairs agent
/// 0's marginal trajectory i with agent 1's marginal trajectory j; only the
/// confidences model the interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPrediction {
    pub grid: JointConfidenceGrid,
    pub marginal0: MarginalPrediction,
    pub marginal1: MarginalPrediction,
}

impl JointPrediction {
    /// The trajectory pair at one grid cell.
    pub fn cell_trajectories(&self, i: usize, j: usize) -> (&Trajectory, &Trajectory) {
        (&self.marginal0.trajectories[i], &self.marginal1.trajectories[j])
    }

    /// The grid a non-interactive model would produce: the outer product of
    /// the two marginal confidence vectors.
    pub fn independent_product_grid(&self) -> JointConfidenceGrid {
        let k = self.grid.k;
        let mut p = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                p[i * k + j] = self.marginal0.confidences[i] * self.marginal1.confidences[j];
            }
        }
        JointConfidenceGrid { k, p }
    }

    /// Same prediction with the independent-product grid swapped in.
    pub fn with_product_grid(&self) -> JointPrediction {
        JointPrediction {
            grid: self.independent_product_grid(),
            marginal0: self.marginal0.clone(),
            marginal1: self.marginal1.clone(),
        }
    }
}

/// Element-wise average of M joint predictions from models that share anchor
/// sets: the grid stays a distribution, trajectories average per anchor.
pub fn ensemble_models(predictions: &[JointPrediction]) -> Result<JointPrediction> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one model".to_string()))?;
    let k = first.grid.k;
    for p in predictions {
        if p.grid.k != k
            || p.marginal0.k() != first.marginal0.k()
            || p.marginal1.k() != first.marginal1.k()
        {
            return Err(Error::ShapeMismatch(
                "ensemble members must share K".to_string(),
            ));
        }
    }
    let m = predictions.len() as f64;
    let mut out = first.clone();
    for idx in 0..out.grid.p.len() {
        out.grid.p[idx] = predictions.iter().map(|p| p.grid.p[idx]).sum::<f64>() / m;
    }
    for (which, marg) in [&mut out.marginal0, &mut out.marginal1].into_iter().enumerate() {
        for a in 0..marg.trajectories.len() {
            marg.confidences[a] = predictions
                .iter()
                .map(|p| {
                    if which == 0 {
                        p.marginal0.confidences[a]
                    } else {
                        p.marginal1.confidences[a]
                    }
                })
                .sum::<f64>()
                / m;
            for t in 0..marg.trajectories[a].points.len() {
                let mut x = 0.0;
                let mut y = 0.0;
                for p in predictions {
                    let src = if which == 0 {
                        &p.marginal0.trajectories[a]
                    } else {
                        &p.marginal1.trajectories[a]
                    };
                    x += src.points[t].x;
                    y += src.points[t].y;
                }
                marg.trajectories[a].points[t] = crate::scenario::Vec2::new(x / m, y / m);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Vec2;

    fn simple_prediction(offset: f64, top: f64) -> JointPrediction {
        let k = 2;
        let grid = JointConfidenceGrid::new(
            k,
            vec![top, 1.0 - top - 0.2, 0.1, 0.1],
        )
        .unwrap();
        let marg = |d: f64| MarginalPrediction {
            trajectories: vec![
                Trajectory::constant(Vec2::new(d, 0.0)),
                Trajectory::constant(Vec2::new(d, 10.0)),
            ],
            confidences: vec![0.5, 0.5],
        };
        JointPrediction {
            grid,
            marginal0: marg(offset),
            marginal1: marg(offset + 1.0),
        }
    }

    #[test]
    fn ensemble_of_one_is_identity() {
        let p = simple_prediction(1.0, 0.6);
        let e = ensemble_models(&[p.clone()]).unwrap();
        assert_eq!(e, p);
    }

    #[test]
    fn ensemble_of_identical_models_is_identity() {
        let p = simple_prediction(2.0, 0.6);
        let e = ensemble_models(&[p.clone(), p.clone(), p.clone()]).unwrap();
        for (a, b) in e.grid.p.iter().zip(p.grid.p.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_averages_cells() {
        let a = simple_prediction(0.0, 0.6);
        let b = simple_prediction(0.0, 0.2);
        let e = ensemble_models(&[a, b]).unwrap();
        assert!((e.grid.get(0, 0) - 0.4).abs() < 1e-15);
        // Mean of distributions is a distribution.
        assert!((e.grid.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_mismatched_k_rejected() {
        let a = simple_prediction(0.0, 0.6);
        let mut b = simple_prediction(0.0, 0.6);
        b.grid = JointConfidenceGrid::uniform(3);
        b.marginal0.trajectories.push(Trajectory::constant(Vec2::zero()));
        b.marginal0.confidences.push(0.0);
        b.marginal1.trajectories.push(Trajectory::constant(Vec2::zero()));
        b.marginal1.confidences.push(0.0);
        assert!(ensemble_models(&[a, b]).is_err());
    }

    #[test]
    fn product_grid_is_outer_product() {
        let mut p = simple_prediction(0.0, 0.6);
        p.marginal0.confidences = vec![0.3, 0.7];
        p.marginal1.confidences = vec![0.9, 0.1];
        let g = p.independent_product_grid();
        assert!((g.get(0, 0) - 0.27).abs() < 1e-15);
        assert!((g.get(1, 1) - 0.07).abs() < 1e-15);
        assert!((g.sum() - 1.0).abs() < 1e-12);
    }
}
