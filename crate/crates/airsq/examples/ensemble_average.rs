//! Ensemble joint predictions from multiple training runs by simple
//! averaging: grids stay normalized, trajectories average per anchor.
//!
//!     cargo run --release --example ensemble_average

use airsq::anchors::fit_all_types;
use airsq::config::RunConfig;
use airsq::model::{assignment_for, ensemble_models, init_params, predict_joint, train, TrainExample};
use airsq::synth::synth_generate;

fn main() -> airsq::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.cluster.k_vehicle = 3;
    cfg.cluster.k_pedestrian = 3;
    cfg.cluster.k_cyclist = 3;
    cfg.model.k_max = 3;
    cfg.model.input_height = 28;
    cfg.model.input_width = 56;
    cfg.raster.height = 56;
    cfg.raster.width = 112;
    cfg.raster.resolution = 1.0;
    cfg.raster.ego_row = 28;
    cfg.raster.ego_col = 28;
    cfg.epochs_marginal = 1;
    cfg.epochs_joint = 1;

    let train_set = synth_generate(60, 31, &cfg.synth);
    let scene = &synth_generate(1, 32, &cfg.synth)[0];
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

    // Different runs of the same config: separate init seeds.
    let mut members = Vec::new();
    for seed in [100, 200, 300, 400] {
        let mut opts = cfg.train_options(seed, None);
        opts.seed = seed;
        let report = train(
            init_params(&cfg.model, seed),
            &examples,
            &anchors,
            &cfg.raster,
            &opts,
        )?;
        let pred = predict_joint(&report.params, scene, &anchors, &cfg.raster)?;
        eprintln!(
            "model {seed}: top cell p = {:.3}",
            pred.grid.cells_by_confidence()[0].2
        );
        members.push(pred);
    }

    let ensembled = ensemble_models(&members)?;
    println!("ensembled {} models", members.len());
    println!("grid sum = {:.12}", ensembled.grid.sum());
    let (i, j, p) = ensembled.grid.cells_by_confidence()[0];
    println!("top joint mode: anchors ({i}, {j}) with probability {p:.3}");
    Ok(())
}
