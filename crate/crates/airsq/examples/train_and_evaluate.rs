//! Small end-to-end run: synthesize scenes, fit anchors, train the joint
//! model (marginal phase then interaction loss), and compare its joint mAP
//! and classification loss against the independent-product baseline built
//! from the same marginal model.
//!
//!     cargo run --release --example train_and_evaluate

use airsq::anchors::fit_all_types;
use airsq::config::RunConfig;
use airsq::metrics::{joint_map, JointGroundTruth};
use airsq::model::{
    assignment_for, init_params, predict_joint, train, JointPrediction, TrainExample,
};
use airsq::synth::{synth_generate, SynthConfig};

fn main() -> airsq::Result<()> {
    let mut cfg = RunConfig::default();
    // Desk-scale sizes so this example runs in about a minute.
    cfg.cluster.k_vehicle = 4;
    cfg.cluster.k_pedestrian = 4;
    cfg.cluster.k_cyclist = 4;
    cfg.model.k_max = 4;
    cfg.model.input_height = 56;
    cfg.model.input_width = 112;
    cfg.epochs_marginal = 2;
    cfg.epochs_joint = 2;

    let train_set = synth_generate(300, 1, &cfg.synth);
    let eval_set = synth_generate(100, 2, &cfg.synth);
    let anchors = fit_all_types(&train_set, &cfg.cluster)?;

    let examples: Vec<TrainExample> = train_set
        .iter()
        .map(|s| {
            Ok(TrainExample {
                scenario: s.clone(),
                assignment: assignment_for(s, &anchors)?,
            })
        })
        .collect::<airsq::Result<_>>()?;

    eprintln!("training on {} scenarios...", examples.len());
    let report = train(
        init_params(&cfg.model, 3),
        &examples,
        &anchors,
        &cfg.raster,
        &cfg.train_options(4, None),
    )?;
    eprintln!("ran {} optimizer steps", report.steps_run);

    let mut predictions: Vec<JointPrediction> = Vec::new();
    let mut truths: Vec<JointGroundTruth> = Vec::new();
    for s in &eval_set {
        predictions.push(predict_joint(&report.params, s, &anchors, &cfg.raster)?);
        truths.push(JointGroundTruth {
            gt0: s.pair_agent(0).future.clone(),
            gt1: s.pair_agent(1).future.clone(),
            assignment: assignment_for(s, &anchors)?,
            types: (s.pair_agent(0).kind, s.pair_agent(1).kind),
        });
    }

    let joint = joint_map(&predictions, &truths, &cfg.map)?;
    let product: Vec<JointPrediction> =
        predictions.iter().map(|p| p.with_product_grid()).collect();
    let baseline = joint_map(&product, &truths, &cfg.map)?;

    println!("joint-model mAP:          {:.4}", joint.mean_ap);
    println!("independent-product mAP:  {:.4}", baseline.mean_ap);
    println!(
        "relative improvement:     {:+.1}%",
        100.0 * (joint.mean_ap - baseline.mean_ap) / baseline.mean_ap.max(1e-12)
    );
    Ok(())
}
