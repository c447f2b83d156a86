//! The interaction loss: joint classification with a marginal supervision
//! term plus anchored regression against the assigned anchors, and its exact
//! closed-form gradients.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorAssignment;
use crate::error::{Error, Result};
use crate::model::JointConfidenceGrid;
use crate::scenario::{Trajectory, Vec2, TRAJ_LEN};

/// Probabilities are clamped here before logs so zero cells stay finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// Relative weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_reg: f64,
    pub w_cls: f64,
    pub w_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_reg: 1.0,
            w_cls: 60.0,
            w_m: 1.0,
        }
    }
}

/// The classification components: the joint term and the marginal
/// supervision term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationLoss {
    /// `-log p_{i*j*}`
    pub core: f64,
    /// `-log sum_j p_{i*j} - log sum_i p_{ij*}`
    pub marginal: f64,
}

/// Fully composed loss with its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub marginal: f64,
    pub reg0: f64,
    pub reg1: f64,
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_CLAMP).ln()
}

/// Joint classification loss: the negative log of the assigned cell, plus
/// the marginal term that supervises the assigned row and column sums.
pub fn classification_loss(
    grid: &JointConfidenceGrid,
    assignment: &AnchorAssignment,
) -> ClassificationLoss {
    let core = neg_log(grid.get(assignment.i_star, assignment.j_star));
    let marginal = neg_log(grid.row_sum(assignment.i_star)) + neg_log(grid.col_sum(assignment.j_star));
    ClassificationLoss { core, marginal }
}

/// Squared-error regression against the assigned anchors only: half the sum
/// over valid ground-truth steps of the squared Euclidean error. Anchors
/// other than (i*, j*) incur no loss.
pub fn regression_loss(
    pred0: &[Trajectory],
    pred1: &[Trajectory],
    gt0: &Trajectory,
    gt1: &Trajectory,
    assignment: &AnchorAssignment,
) -> (f64, f64) {
    let one = |pred: &Trajectory, gt: &Trajectory| -> f64 {
        let mut sum = 0.0;
        for t in 0..TRAJ_LEN {
            if gt.valid[t] {
                sum += pred.points[t].dist_sq(gt.points[t]);
            }
        }
        0.5 * sum
    };
    (
        one(&pred0[assignment.i_star], gt0),
        one(&pred1[assignment.j_star], gt1),
    )
}

/// Compose the weighted total:
/// `w_reg * (reg0 + reg1) + w_cls * (cls + w_m * marginal)`.
pub fn total_loss(
    cls: ClassificationLoss,
    reg: (f64, f64),
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let total = weights.w_reg * (reg.0 + reg.1) + weights.w_cls * (cls.core + weights.w_m * cls.marginal);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss total (cls {} marginal {} reg {:?})",
            cls.core, cls.marginal, reg
        )));
    }
    Ok(LossBreakdown {
        total,
        cls: cls.core,
        marginal: cls.marginal,
        reg0: reg.0,
        reg1: reg.1,
    })
}

/// Gradients of the weighted total loss with respect to the grid entries and
/// the predicted trajectory points.
#[derive(Debug, Clone)]
pub struct LossGradients {
    /// d total / d p_ij, row-major K x K.
    pub d_grid: Vec<f64>,
    /// d total / d predicted point, per anchor per step; zero off the
    /// assigned anchor and at invalid ground-truth steps.
    pub d_pred0: Vec<Vec<Vec2>>,
    pub d_pred1: Vec<Vec<Vec2>>,
}

/// Derivative of `-log(max(p, clamp))`: zero in the clamped region.
fn d_neg_log(p: f64) -> f64 {
    if p > PROB_CLAMP {
        -1.0 / p
    } else {
        0.0
    }
}

pub fn loss_gradients(
    grid: &JointConfidenceGrid,
    pred0: &[Trajectory],
    pred1: &[Trajectory],
    gt0: &Trajectory,
    gt1: &Trajectory,
    assignment: &AnchorAssignment,
    weights: &LossWeights,
) -> LossGradients {
    let k = grid.k;
    let (i_star, j_star) = (assignment.i_star, assignment.j_star);
    let mut d_grid = vec![0.0; k * k];

    let d_core = d_neg_log(grid.get(i_star, j_star));
    d_grid[i_star * k + j_star] += weights.w_cls * d_core;

    let d_row = d_neg_log(grid.row_sum(i_star));
    for j in 0..k {
        d_grid[i_star * k + j] += weights.w_cls * weights.w_m * d_row;
    }
    let d_col = d_neg_log(grid.col_sum(j_star));
    for i in 0..k {
        d_grid[i * k + j_star] += weights.w_cls * weights.w_m * d_col;
    }

    let zero_grad = |preds: &[Trajectory]| -> Vec<Vec<Vec2>> {
        preds
            .iter()
            .map(|p| vec![Vec2::zero(); p.points.len()])
            .collect()
    };
    let mut d_pred0 = zero_grad(pred0);
    let mut d_pred1 = zero_grad(pred1);
    for t in 0..TRAJ_LEN {
        if gt0.valid[t] {
            let d = pred0[i_star].points[t] - gt0.points[t];
            d_pred0[i_star][t] = d * weights.w_reg;
        }
        if gt1.valid[t] {
            let d = pred1[j_star].points[t] - gt1.points[t];
            d_pred1[j_star][t] = d * weights.w_reg;
        }
    }

    LossGradients {
        d_grid,
        d_pred0,
        d_pred1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assignment(i: usize, j: usize) -> AnchorAssignment {
        AnchorAssignment { i_star: i, j_star: j }
    }

    fn offset_preds(k: usize, offset: Vec2) -> (Vec<Trajectory>, Trajectory) {
        let gt: Vec<Vec2> = (0..TRAJ_LEN).map(|t| Vec2::new(t as f64, -0.5)).collect();
        let gt = Trajectory::from_points(gt).unwrap();
        let preds = (0..k)
            .map(|_| {
                Trajectory::from_points(gt.points.iter().map(|&p| p + offset).collect()).unwrap()
            })
            .collect();
        (preds, gt)
    }

    #[test]
    fn one_hot_grid_zero_loss() {
        let grid = JointConfidenceGrid::one_hot(3, 1, 2);
        let cls = classification_loss(&grid, &assignment(1, 2));
        assert_eq!(cls.core, 0.0);
        assert_eq!(cls.marginal, 0.0);
    }

    #[test]
    fn uniform_two_by_two_analytic() {
        let grid = JointConfidenceGrid::uniform(2);
        let cls = classification_loss(&grid, &assignment(0, 1));
        assert!((cls.core - 4.0f64.ln()).abs() < 1e-12);
        assert!((cls.marginal - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_grid_matches_scalar_reevaluation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let k = 4;
        let mut p: Vec<f64> = (0..k * k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let grid = JointConfidenceGrid::new(k, p.clone()).unwrap();
        let a = assignment(2, 1);
        let cls = classification_loss(&grid, &a);
        // Independent scalar evaluation.
        let core = -p[2 * k + 1].ln();
        let row: f64 = (0..k).map(|j| p[2 * k + j]).sum();
        let col: f64 = (0..k).map(|i| p[i * k + 1]).sum();
        let marginal = -row.ln() - col.ln();
        assert!((cls.core - core).abs() < 1e-12);
        assert!((cls.marginal - marginal).abs() < 1e-12);
    }

    #[test]
    fn regression_zero_when_exact() {
        let (preds, gt) = offset_preds(3, Vec2::zero());
        let (r0, r1) = regression_loss(&preds, &preds, &gt, &gt, &assignment(1, 2));
        assert_eq!((r0, r1), (0.0, 0.0));
    }

    #[test]
    fn regression_unit_offset_is_forty() {
        let (preds, gt) = offset_preds(2, Vec2::new(1.0, 0.0));
        let (r0, r1) = regression_loss(&preds, &preds, &gt, &gt, &assignment(0, 1));
        assert!((r0 - 40.0).abs() < 1e-12);
        assert!((r1 - 40.0).abs() < 1e-12);
    }

    #[test]
    fn regression_masks_invalid_steps() {
        let (preds, mut gt) = offset_preds(2, Vec2::new(0.0, 2.0));
        for t in 40..TRAJ_LEN {
            gt.valid[t] = false;
        }
        let (r0, _) = regression_loss(&preds, &preds, &gt, &gt, &assignment(0, 0));
        assert!((r0 - 0.5 * 40.0 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn total_matches_paper_operating_point() {
        let grid = JointConfidenceGrid::uniform(2);
        let cls = classification_loss(&grid, &assignment(0, 0));
        let (preds, gt) = offset_preds(2, Vec2::new(1.0, 0.0));
        let reg = regression_loss(&preds, &preds, &gt, &gt, &assignment(0, 0));
        let weights = LossWeights::default();
        let breakdown = total_loss(cls, reg, &weights).unwrap();
        assert!((breakdown.total - 246.36).abs() < 0.01, "{}", breakdown.total);
    }

    #[test]
    fn zero_weights_zero_total() {
        let grid = JointConfidenceGrid::uniform(3);
        let cls = classification_loss(&grid, &assignment(0, 0));
        let weights = LossWeights {
            w_reg: 0.0,
            w_cls: 0.0,
            w_m: 0.0,
        };
        let b = total_loss(cls, (17.0, 3.0), &weights).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn w_m_zero_removes_marginal_term() {
        let grid = JointConfidenceGrid::uniform(2);
        let cls = classification_loss(&grid, &assignment(1, 0));
        let weights = LossWeights {
            w_reg: 1.0,
            w_cls: 2.0,
            w_m: 0.0,
        };
        let b = total_loss(cls, (0.0, 0.0), &weights).unwrap();
        assert!((b.total - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn breakdown_composition_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut p: Vec<f64> = (0..9).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let grid = JointConfidenceGrid::new(3, p).unwrap();
            let weights = LossWeights {
                w_reg: rng.gen_range(0.0..3.0),
                w_cls: rng.gen_range(0.0..80.0),
                w_m: rng.gen_range(0.0..2.0),
            };
            let cls = classification_loss(&grid, &assignment(1, 1));
            let reg = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            let b = total_loss(cls, reg, &weights).unwrap();
            let composed =
                weights.w_reg * (b.reg0 + b.reg1) + weights.w_cls * (b.cls + weights.w_m * b.marginal);
            assert!((b.total - composed).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_term_bounded_by_core_per_row_and_column() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let k = 4;
            let mut p: Vec<f64> = (0..k * k).map(|_| rng.gen_range(0.001..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let grid = JointConfidenceGrid::new(k, p).unwrap();
            let a = assignment(rng.gen_range(0..k), rng.gen_range(0..k));
            let cls = classification_loss(&grid, &a);
            assert!(cls.core >= 0.0);
            assert!(cls.marginal >= 0.0);
            // Row/col sums dominate the assigned cell.
            assert!(-grid.row_sum(a.i_star).ln() <= cls.core + 1e-12);
            assert!(-grid.col_sum(a.j_star).ln() <= cls.core + 1e-12);
        }
    }

    #[test]
    fn regression_invariant_to_rigid_transform() {
        use crate::scenario::Pose;
        let (preds, gt) = offset_preds(2, Vec2::new(0.7, -0.4));
        let a = assignment(0, 1);
        let (r0, r1) = regression_loss(&preds, &preds, &gt, &gt, &a);
        let pose = Pose::new(Vec2::new(31.0, -7.0), 1.234);
        let tp: Vec<Trajectory> = preds.iter().map(|t| t.to_world_frame(&pose)).collect();
        let tg = gt.to_world_frame(&pose);
        let (s0, s1) = regression_loss(&tp, &tp, &tg, &tg, &a);
        assert!((r0 - s0).abs() < 1e-9 * (1.0 + r0));
        assert!((r1 - s1).abs() < 1e-9 * (1.0 + r1));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let k = 3;
        let mut p: Vec<f64> = (0..k * k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let grid = JointConfidenceGrid::new(k, p).unwrap();
        let (mut preds0, mut gt0) = offset_preds(k, Vec2::new(0.3, -0.2));
        let (preds1, gt1) = offset_preds(k, Vec2::new(-0.6, 0.1));
        for t in 55..TRAJ_LEN {
            gt0.valid[t] = false;
        }
        let a = assignment(1, 2);
        let weights = LossWeights {
            w_reg: 0.7,
            w_cls: 13.0,
            w_m: 0.9,
        };
        let eval = |grid: &JointConfidenceGrid, p0: &[Trajectory], p1: &[Trajectory]| {
            let cls = classification_loss(grid, &a);
            let reg = regression_loss(p0, p1, &gt0, &gt1, &a);
            total_loss(cls, reg, &weights).unwrap().total
        };
        let g = loss_gradients(&grid, &preds0, &preds1, &gt0, &gt1, &a, &weights);
        let h = 1e-7;

        // Grid entries.
        let mut grid_fd = grid.clone();
        for idx in 0..k * k {
            let orig = grid_fd.p[idx];
            grid_fd.p[idx] = orig + h;
            let up = eval(&grid_fd, &preds0, &preds1);
            grid_fd.p[idx] = orig - h;
            let down = eval(&grid_fd, &preds0, &preds1);
            grid_fd.p[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.d_grid[idx];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-9);
            assert!(rel < 1e-6, "grid[{idx}]: fd {fd} vs {an}");
        }

        // A sample of predicted points (assigned and unassigned anchors).
        for &(anchor, t) in &[(1usize, 0usize), (1, 30), (1, 60), (0, 10), (2, 40)] {
            for coord in 0..2 {
                let orig = preds0[anchor].points[t];
                let delta = if coord == 0 {
                    Vec2::new(h, 0.0)
                } else {
                    Vec2::new(0.0, h)
                };
                preds0[anchor].points[t] = orig + delta;
                let up = eval(&grid, &preds0, &preds1);
                preds0[anchor].points[t] = orig - delta;
                let down = eval(&grid, &preds0, &preds1);
                preds0[anchor].points[t] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = if coord == 0 {
                    g.d_pred0[anchor][t].x
                } else {
                    g.d_pred0[anchor][t].y
                };
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-9);
                assert!(rel < 1e-6, "pred0[{anchor}][{t}] c{coord}: fd {fd} vs {an}");
                if anchor != a.i_star {
                    assert_eq!(an, 0.0);
                }
                if t >= 55 && coord == 0 {
                    // Invalid ground-truth steps receive no gradient.
                    assert_eq!(g.d_pred0[a.i_star][t].x, 0.0);
                }
            }
        }
    }
}
