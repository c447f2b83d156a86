//! Joint mAP and distance metrics, the reveal operations that blend
//! predictions toward ground truth, and the metric-loss sensitivity analysis
//! used to recommend loss weights.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorAssignment;
use crate::error::{Error, Result};
use crate::loss::{classification_loss, regression_loss, LossWeights};
use crate::model::{JointConfidenceGrid, JointPrediction};
use crate::scenario::{ObjectType, Trajectory, TRAJ_LEN};

/// Joint mAP configuration: how many grid cells compete per scenario and the
/// per-step hit gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapConfig {
    pub top_k: usize,
    /// 1-based measurement steps into the 80-step horizon.
    pub measurement_steps: Vec<usize>,
    /// Hit threshold in meters per measurement step.
    pub thresholds: Vec<f64>,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            top_k: 6,
            measurement_steps: vec![30, 50, 80],
            thresholds: vec![2.0, 3.6, 6.0],
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".to_string()));
        }
        if self.measurement_steps.len() != self.thresholds.len() {
            return Err(Error::Config(
                "measurement_steps and thresholds must align".to_string(),
            ));
        }
        if self
            .measurement_steps
            .iter()
            .any(|&s| s == 0 || s > TRAJ_LEN)
        {
            return Err(Error::Config(format!(
                "measurement steps must be in 1..={TRAJ_LEN}"
            )));
        }
        if self.thresholds.iter().any(|&t| t <= 0.0) {
            return Err(Error::Config("thresholds must be positive".to_string()));
        }
        Ok(())
    }
}

/// Ground truth for one scenario: both futures, the anchor assignment, and
/// the object-type pair used for bucketing.
#[derive(Debug, Clone)]
pub struct JointGroundTruth {
    pub gt0: Trajectory,
    pub gt1: Trajectory,
    pub assignment: AnchorAssignment,
    pub types: (ObjectType, ObjectType),
}

/// A joint candidate is a hit when BOTH agents are within the step threshold
/// of ground truth at every measurement step (steps with invalid ground
/// truth pass trivially).
fn is_hit(
    pred0: &Trajectory,
    pred1: &Trajectory,
    truth: &JointGroundTruth,
    config: &MapConfig,
) -> bool {
    for (&step, &thr) in config.measurement_steps.iter().zip(config.thresholds.iter()) {
        let t = step - 1;
        if truth.gt0.valid[t] && pred0.points[t].dist(truth.gt0.points[t]) > thr {
            return false;
        }
        if truth.gt1.valid[t] && pred1.points[t].dist(truth.gt1.points[t]) > thr {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy)]
struct Detection {
    confidence: f64,
    is_tp: bool,
    scenario: usize,
    cell: usize,
}

/// Interpolated (monotone-precision) average precision.
fn average_precision(mut detections: Vec<Detection>, num_gt: usize) -> f64 {
    if num_gt == 0 || detections.is_empty() {
        return 0.0;
    }
    detections.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("confidences are finite")
            .then(a.scenario.cmp(&b.scenario))
            .then(a.cell.cmp(&b.cell))
    });
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(detections.len());
    for d in &detections {
        if d.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // Precision envelope from the right, then integrate over recall steps.
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    ap
}

/// Per-bucket average precision.
#[derive(Debug, Clone, Serialize)]
pub struct BucketAp {
    pub types: (String, String),
    pub ap: f64,
    pub num_scenarios: usize,
}

/// Joint mAP report: the bucket mean plus the per-bucket table.
#[derive(Debug, Clone, Serialize)]
pub struct MapReport {
    pub mean_ap: f64,
    pub buckets: Vec<BucketAp>,
}

/// Joint mAP: per scenario, the `top_k` grid cells by confidence compete;
/// only the highest-confidence hit is a true positive and every other
/// candidate is a false positive. Detections pool per object-type-pair
/// bucket into precision-recall curves; the mean over non-empty buckets is
/// the reported mAP.
pub fn joint_map(
    predictions: &[JointPrediction],
    truths: &[JointGroundTruth],
    config: &MapConfig,
) -> Result<MapReport> {
    config.validate()?;
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Config(format!(
            "need non-empty aligned inputs (got {} predictions, {} truths)",
            predictions.len(),
            truths.len()
        )));
    }
    let mut bucket_dets: std::collections::BTreeMap<(usize, usize), Vec<Detection>> =
        std::collections::BTreeMap::new();
    let mut bucket_counts: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();

    for (s, (pred, truth)) in predictions.iter().zip(truths.iter()).enumerate() {
        let key = (truth.types.0.index(), truth.types.1.index());
        *bucket_counts.entry(key).or_insert(0) += 1;
        let cells = pred.grid.cells_by_confidence();
        let candidates = &cells[..config.top_k.min(cells.len())];
        // Highest-confidence hit; candidates are already sorted.
        let tp_pos = candidates.iter().position(|&(i, j, _)| {
            let (t0, t1) = pred.cell_trajectories(i, j);
            is_hit(t0, t1, truth, config)
        });
        let dets = bucket_dets.entry(key).or_default();
        for (pos, &(i, j, conf)) in candidates.iter().enumerate() {
            dets.push(Detection {
                confidence: conf,
                is_tp: tp_pos == Some(pos),
                scenario: s,
                cell: i * pred.grid.k + j,
            });
        }
    }

    let mut buckets = Vec::new();
    let mut sum = 0.0;
    for (key, dets) in bucket_dets {
        let num_gt = bucket_counts[&key];
        let ap = average_precision(dets, num_gt);
        sum += ap;
        buckets.push(BucketAp {
            types: (
                ObjectType::ALL[key.0].name().to_string(),
                ObjectType::ALL[key.1].name().to_string(),
            ),
            ap,
            num_scenarios: num_gt,
        });
    }
    Ok(MapReport {
        mean_ap: sum / buckets.len() as f64,
        buckets,
    })
}

fn displacement_stats(pred: &Trajectory, gt: &Trajectory) -> (f64, f64) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut last = 0.0;
    for t in 0..TRAJ_LEN {
        if gt.valid[t] {
            let d = pred.points[t].dist(gt.points[t]);
            sum += d;
            n += 1;
            last = d;
        }
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (sum / n as f64, last)
    }
}

/// Minimum over all grid cells of the joint average displacement error
/// (mean over both agents, valid ground-truth steps only).
pub fn min_joint_ade(prediction: &JointPrediction, truth: &JointGroundTruth) -> f64 {
    min_joint_metric(prediction, truth, |p, g| displacement_stats(p, g).0)
}

/// Minimum over all grid cells of the joint final (last valid step)
/// displacement error, averaged over both agents.
pub fn min_joint_fde(prediction: &JointPrediction, truth: &JointGroundTruth) -> f64 {
    min_joint_metric(prediction, truth, |p, g| displacement_stats(p, g).1)
}

fn min_joint_metric(
    prediction: &JointPrediction,
    truth: &JointGroundTruth,
    per_agent: impl Fn(&Trajectory, &Trajectory) -> f64,
) -> f64 {
    let k = prediction.grid.k;
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in 0..k {
            let (t0, t1) = prediction.cell_trajectories(i, j);
            let v = 0.5 * (per_agent(t0, &truth.gt0) + per_agent(t1, &truth.gt1));
            if v < best {
                best = v;
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Reveal operations
// ---------------------------------------------------------------------------

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Blend the grid toward the one-hot ground-truth grid:
/// `(1 - alpha) * p + alpha * p_gt`. Stays normalized.
pub fn reveal_confidences(
    grid: &JointConfidenceGrid,
    assignment: &AnchorAssignment,
    alpha: f64,
) -> Result<JointConfidenceGrid> {
    check_alpha(alpha)?;
    let mut out = grid.clone();
    for v in out.p.iter_mut() {
        *v *= 1.0 - alpha;
    }
    let idx = assignment.i_star * grid.k + assignment.j_star;
    out.p[idx] += alpha;
    Ok(out)
}

/// Blend only the assigned anchors' trajectories toward ground truth; every
/// other anchor stays bitwise unchanged. Steps where ground truth is invalid
/// are left as predicted.
pub fn reveal_trajectories(
    prediction: &JointPrediction,
    truth: &JointGroundTruth,
    alpha: f64,
) -> Result<JointPrediction> {
    check_alpha(alpha)?;
    let mut out = prediction.clone();
    let blend = |pred: &mut Trajectory, gt: &Trajectory| {
        for t in 0..TRAJ_LEN {
            if gt.valid[t] {
                // Increment form: exact fixed point when pred == gt.
                let d = gt.points[t] - pred.points[t];
                pred.points[t] = pred.points[t] + d * alpha;
            }
        }
    };
    blend(
        &mut out.marginal0.trajectories[truth.assignment.i_star],
        &truth.gt0,
    );
    blend(
        &mut out.marginal1.trajectories[truth.assignment.j_star],
        &truth.gt1,
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sensitivity analysis
// ---------------------------------------------------------------------------

/// Means of the monitored quantities over an eval set.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BaselinePoint {
    pub map: f64,
    pub l_cls: f64,
    pub l_reg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityReport {
    pub alpha: f64,
    pub baseline: BaselinePoint,
    /// mAP and classification loss after revealing confidences.
    pub revealed_conf: (f64, f64),
    /// mAP and regression loss after revealing trajectories.
    pub revealed_traj: (f64, f64),
    /// mAP gain per unit decrease in classification loss; undefined when the
    /// loss did not move.
    pub ratio_cls: Option<f64>,
    pub ratio_reg: Option<f64>,
    /// (w_cls, w_reg) normalized so w_reg = 1; present when both ratios are
    /// defined and positive.
    pub recommended: Option<(f64, f64)>,
}

fn mean_losses(
    predictions: &[JointPrediction],
    truths: &[JointGroundTruth],
    weights: &LossWeights,
) -> (f64, f64) {
    let n = predictions.len() as f64;
    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    for (pred, truth) in predictions.iter().zip(truths.iter()) {
        let cls = classification_loss(&pred.grid, &truth.assignment);
        cls_sum += cls.core + weights.w_m * cls.marginal;
        let (r0, r1) = regression_loss(
            &pred.marginal0.trajectories,
            &pred.marginal1.trajectories,
            &truth.gt0,
            &truth.gt1,
            &truth.assignment,
        );
        reg_sum += r0 + r1;
    }
    (cls_sum / n, reg_sum / n)
}

/// Reveal confidences and trajectories separately across the whole eval set,
/// measure the mAP gained per unit of loss decrease on each axis, and derive
/// recommended loss weights proportional to the two ratios (w_reg = 1).
pub fn sensitivity_analysis(
    predictions: &[JointPrediction],
    truths: &[JointGroundTruth],
    alpha: f64,
    weights: &LossWeights,
    map_config: &MapConfig,
) -> Result<SensitivityReport> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Err(Error::Config("alpha must be positive".to_string()));
    }
    if predictions.is_empty() {
        return Err(Error::Config(
            "sensitivity needs a non-empty eval set".to_string(),
        ));
    }

    let base_map = joint_map(predictions, truths, map_config)?.mean_ap;
    let (base_cls, base_reg) = mean_losses(predictions, truths, weights);

    let revealed_c: Vec<JointPrediction> = predictions
        .iter()
        .zip(truths.iter())
        .map(|(p, t)| {
            Ok(JointPrediction {
                grid: reveal_confidences(&p.grid, &t.assignment, alpha)?,
                marginal0: p.marginal0.clone(),
                marginal1: p.marginal1.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let conf_map = joint_map(&revealed_c, truths, map_config)?.mean_ap;
    let (conf_cls, _) = mean_losses(&revealed_c, truths, weights);

    let revealed_t: Vec<JointPrediction> = predictions
        .iter()
        .zip(truths.iter())
        .map(|(p, t)| reveal_trajectories(p, t, alpha))
        .collect::<Result<_>>()?;
    let traj_map = joint_map(&revealed_t, truths, map_config)?.mean_ap;
    let (_, traj_reg) = mean_losses(&revealed_t, truths, weights);

    let d_cls = base_cls - conf_cls;
    let d_reg = base_reg - traj_reg;
    let ratio_cls = (d_cls != 0.0).then(|| (conf_map - base_map) / d_cls);
    let ratio_reg = (d_reg != 0.0).then(|| (traj_map - base_map) / d_reg);
    let recommended = match (ratio_cls, ratio_reg) {
        (Some(rc), Some(rr)) if rc > 0.0 && rr > 0.0 => Some((rc / rr, 1.0)),
        _ => None,
    };

    Ok(SensitivityReport {
        alpha,
        baseline: BaselinePoint {
            map: base_map,
            l_cls: base_cls,
            l_reg: base_reg,
        },
        revealed_conf: (conf_map, conf_cls),
        revealed_traj: (traj_map, traj_reg),
        ratio_cls,
        ratio_reg,
        recommended,
    })
}

/// Weights proportional to the sensitivity ratios, normalized so w_reg = 1.
/// `w_m` is carried over from the supplied weights.
pub fn recommend_weights(report: &SensitivityReport, current: &LossWeights) -> Result<LossWeights> {
    let rc = report
        .ratio_cls
        .ok_or_else(|| Error::UndefinedRatio("classification loss did not move".to_string()))?;
    let rr = report
        .ratio_reg
        .ok_or_else(|| Error::UndefinedRatio("regression loss did not move".to_string()))?;
    if rc <= 0.0 || rr <= 0.0 {
        return Err(Error::UndefinedRatio(format!(
            "ratios must be positive (cls {rc}, reg {rr})"
        )));
    }
    Ok(LossWeights {
        w_reg: 1.0,
        w_cls: rc / rr,
        w_m: current.w_m,
    })
}
