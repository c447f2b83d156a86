//! Generate synthetic crossing-paths scenarios, write them as JSONL, and
//! show the exact round trip plus basic statistics.
//!
//!     cargo run --release --example synthesize_scenarios

use airsq::scenario::{load_scenarios, save_scenarios, ObjectType};
use airsq::synth::{synth_generate, SynthConfig};

fn main() -> airsq::Result<()> {
    let out_dir = std::path::Path::new("target/airsq-examples");
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("scenarios.jsonl");

    let scenarios = synth_generate(200, 7, &SynthConfig::default());
    save_scenarios(&path, &scenarios)?;
    let loaded = load_scenarios(&path)?;
    assert_eq!(loaded, scenarios, "JSONL round trip is lossless");

    let mut type_counts = [0usize; 3];
    let mut sdc = 0usize;
    for s in &scenarios {
        for slot in 0..2 {
            let a = s.pair_agent(slot);
            type_counts[a.kind.index()] += 1;
            sdc += a.is_sdc as usize;
        }
    }
    println!("wrote {} scenarios to {}", scenarios.len(), path.display());
    for kind in ObjectType::ALL {
        println!("  pair agents of type {kind}: {}", type_counts[kind.index()]);
    }
    println!("  sdc-flagged pair agents: {sdc}");
    println!(
        "  agents per scenario: min {}, max {}",
        scenarios.iter().map(|s| s.agents.len()).min().unwrap(),
        scenarios.iter().map(|s| s.agents.len()).max().unwrap()
    );
    Ok(())
}
