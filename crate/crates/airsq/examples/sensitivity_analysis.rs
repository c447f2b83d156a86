//! Metric-loss sensitivity analysis: partially reveal confidences and
//! trajectories toward ground truth, measure the mAP gained per unit of
//! loss decrease on each axis, and derive recommended loss weights.
//!
//!     cargo run --release --example sensitivity_analysis

use airsq::anchors::AnchorAssignment;
use airsq::loss::LossWeights;
use airsq::metrics::{recommend_weights, sensitivity_analysis, JointGroundTruth, MapConfig};
use airsq::model::{JointConfidenceGrid, JointPrediction, MarginalPrediction};
use airsq::scenario::{ObjectType, Trajectory, Vec2, TRAJ_LEN};
use rand::{Rng, SeedableRng};

fn straight(offset: Vec2, speed: f64) -> Trajectory {
    Trajectory::from_points(
        (0..TRAJ_LEN)
            .map(|t| Vec2::new(speed * 0.1 * (t + 1) as f64, 0.0) + offset)
            .collect(),
    )
    .unwrap()
}

fn main() -> airsq::Result<()> {
    // A model with both defects: the assigned anchor is a few meters off the
    // truth and confidences are noisy, so both reveals can help mAP.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let k = 3;
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..60 {
        let gt0 = straight(Vec2::zero(), 10.0);
        let gt1 = straight(Vec2::new(0.0, 25.0), 8.0);
        let off = Vec2::new(0.0, rng.gen_range(1.5..3.0));
        let marg = |gt: &Trajectory, rng: &mut rand_chacha::ChaCha8Rng| MarginalPrediction {
            trajectories: (0..k)
                .map(|a| {
                    let scale = a as f64;
                    Trajectory::from_points(
                        gt.points
                            .iter()
                            .map(|&p| p + off * (1.0 + scale) * 0.7)
                            .collect(),
                    )
                    .unwrap()
                })
                .collect(),
            confidences: {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            },
        };
        let m0 = marg(&gt0, &mut rng);
        let m1 = marg(&gt1, &mut rng);
        let raw: Vec<f64> = (0..k * k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        predictions.push(JointPrediction {
            grid: JointConfidenceGrid::new(k, raw.into_iter().map(|v| v / s).collect())?,
            marginal0: m0,
            marginal1: m1,
        });
        truths.push(JointGroundTruth {
            gt0,
            gt1,
            assignment: AnchorAssignment { i_star: 0, j_star: 0 },
            types: (ObjectType::Vehicle, ObjectType::Vehicle),
        });
    }

    let weights = LossWeights::default();
    let report = sensitivity_analysis(&predictions, &truths, 0.1, &weights, &MapConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());

    match recommend_weights(&report, &weights) {
        Ok(w) => println!(
            "recommended weights: w_cls = {:.2}, w_reg = {:.2}, w_m = {:.2}",
            w.w_cls, w.w_reg, w.w_m
        ),
        Err(e) => println!("no recommendation: {e}"),
    }
    Ok(())
}
