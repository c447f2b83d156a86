//! Render a scenario into ego-centered images: the plain representation and
//! the re-rasterized one with the partner's (here: ground-truth) future
//! drawn in, written as PPM files.
//!
//!     cargo run --release --example rasterize_scene

use airsq::raster::{rasterize, rerasterize, write_ppm, RasterConfig};
use airsq::synth::{synth_generate, SynthConfig};

fn main() -> airsq::Result<()> {
    let out_dir = std::path::Path::new("target/airsq-examples");
    std::fs::create_dir_all(out_dir)?;

    let scenario = &synth_generate(1, 21, &SynthConfig::default())[0];
    let cfg = RasterConfig::default();

    for slot in 0..2 {
        let plain = rasterize(scenario, slot, &cfg)?;
        let path = out_dir.join(format!("scene_agent{slot}.ppm"));
        write_ppm(&plain, &path)?;

        // Stand in for a model prediction with the partner's real future.
        let partner_future = scenario.pair_agent(1 - slot).future.clone();
        let rr = rerasterize(scenario, slot, &partner_future, &cfg)?;
        let rr_path = out_dir.join(format!("scene_agent{slot}_rerasterized.ppm"));
        write_ppm(&rr, &rr_path)?;

        let ego_px = plain.get(cfg.ego_row, cfg.ego_col);
        println!(
            "agent {slot}: ego pixel ({}, {}) = {:?} -> {} / {}",
            cfg.ego_row,
            cfg.ego_col,
            ego_px,
            path.display(),
            rr_path.display()
        );
    }
    Ok(())
}
