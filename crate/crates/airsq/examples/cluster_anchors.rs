//! Fit per-object-type anchor sets with masked K-Means and save them.
//!
//!     cargo run --release --example cluster_anchors

use airsq::anchors::{assign_anchor, fit_all_types, save_anchor_dir, ClusterConfig};
use airsq::synth::{synth_generate, SynthConfig};

fn main() -> airsq::Result<()> {
    let out_dir = std::path::Path::new("target/airsq-examples/anchors");
    let scenarios = synth_generate(600, 11, &SynthConfig::default());

    let config = ClusterConfig {
        k_vehicle: 8,
        k_pedestrian: 4,
        k_cyclist: 6,
        iters: 40,
        seed: 3,
        ..ClusterConfig::default()
    };
    let sets = fit_all_types(&scenarios, &config)?;
    save_anchor_dir(out_dir, &sets)?;

    for (kind, set) in &sets {
        println!("{kind}: K={} members={:?}", set.k(), set.counts);
        // Endpoint spread shows the go/stop bimodality the generator plants.
        let mut ends: Vec<f64> = set
            .centroids
            .iter()
            .map(|c| c.points[0].dist(*c.points.last().unwrap()))
            .collect();
        ends.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "  centroid path lengths: shortest {:.1} m, longest {:.1} m",
            ends.first().unwrap(),
            ends.last().unwrap()
        );
    }

    // Assign one scenario's ground truth to its anchors.
    let s = &scenarios[0];
    for slot in 0..2 {
        let agent = s.pair_agent(slot);
        let idx = assign_anchor(&agent.ego_future()?, &sets[&agent.kind])?;
        println!("scenario 0 slot {slot} ({}) -> anchor {idx}", agent.kind);
    }
    println!("anchor files in {}", out_dir.display());
    Ok(())
}
