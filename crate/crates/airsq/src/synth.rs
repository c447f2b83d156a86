//! Deterministic synthetic interacting-scenario generator.
//!
//! Each scene puts two agents on crossing straight paths through a shared
//! conflict point. A latent coin picks exactly one of the pair to yield: the
//! yielder decelerates and stops short of the conflict point while the other
//! proceeds at cruise speed. Both agents' pasts are constant-velocity
//! approaches, so the coin is invisible in the model inputs: each agent's
//! marginal behavior is bimodal, but the joint outcome is anti-correlated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scenario::{
    wrap_angle, Agent, ObjectType, PastState, PastStates, Scenario, Trajectory, Vec2, PAST_LEN,
    TRAJ_LEN,
};

/// Generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Seconds until the proceeding agent reaches the conflict point,
    /// sampled uniformly from this range.
    pub time_to_conflict: (f64, f64),
    /// Stop margin short of the conflict point in meters.
    pub yield_margin: (f64, f64),
    /// Lateral white noise applied to future points, meters (std-like bound;
    /// sampled uniformly from [-noise, noise]).
    pub lateral_noise: f64,
    /// Probability that any future step of a pair agent is marked invalid.
    pub invalid_rate: f64,
    /// Maximum number of parked context vehicles.
    pub max_context: usize,
    /// Probability that one of the pair agents is flagged as the SDC.
    pub sdc_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            time_to_conflict: (3.5, 5.5),
            yield_margin: (3.0, 6.0),
            lateral_noise: 0.08,
            invalid_rate: 0.02,
            max_context: 3,
            sdc_rate: 0.3,
        }
    }
}

const STEP_DT: f64 = 0.1;

fn cruise_speed(kind: ObjectType, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        ObjectType::Vehicle => 10.0 + rng.gen_range(-0.5..0.5),
        ObjectType::Cyclist => 5.0 + rng.gen_range(-0.5..0.5),
        ObjectType::Pedestrian => 1.5 + rng.gen_range(-0.2..0.2),
    }
}

/// Distance traveled along the path after `t` seconds for an agent that
/// starts at speed `v` and, when yielding, decelerates uniformly to rest
/// exactly `stop_dist` down the path.
fn path_progress(v: f64, t: f64, yielding: bool, stop_dist: f64) -> f64 {
    if !yielding {
        return v * t;
    }
    // v^2 = 2 a s  =>  a = v^2 / (2 s), stop time T = v / a.
    let a = v * v / (2.0 * stop_dist);
    let stop_time = v / a;
    if t >= stop_time {
        stop_dist
    } else {
        v * t - 0.5 * a * t * t
    }
}

struct AgentPlan {
    kind: ObjectType,
    /// Unit direction of travel.
    dir: Vec2,
    /// Position at the current time step.
    start: Vec2,
    speed: f64,
    yielding: bool,
    stop_dist: f64,
}

impl AgentPlan {
    fn build_agent(&self, id: i64, is_sdc: bool, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Agent {
        let heading = wrap_angle(self.dir.y.atan2(self.dir.x));
        let lateral = Vec2::new(-self.dir.y, self.dir.x);
        let states: Vec<PastState> = (0..PAST_LEN)
            .map(|i| {
                let back = (PAST_LEN - 1 - i) as f64 * STEP_DT * self.speed;
                PastState {
                    pos: self.start - self.dir * back,
                    vel: self.dir * self.speed,
                    heading,
                    valid: true,
                }
            })
            .collect();
        let mut points = Vec::with_capacity(TRAJ_LEN);
        let mut valid = Vec::with_capacity(TRAJ_LEN);
        for t in 0..TRAJ_LEN {
            let secs = (t + 1) as f64 * STEP_DT;
            let s = path_progress(self.speed, secs, self.yielding, self.stop_dist);
            let jitter = lateral * rng.gen_range(-cfg.lateral_noise..cfg.lateral_noise);
            points.push(self.start + self.dir * s + jitter);
            valid.push(!rng.gen_bool(cfg.invalid_rate));
        }
        // Keep the endpoints observable so assignments stay meaningful.
        valid[0] = true;
        valid[TRAJ_LEN - 1] = true;
        Agent {
            id,
            kind: ObjectType::ALL[self.kind.index()],
            is_sdc,
            past: PastStates::new(states).expect("generated past satisfies invariants"),
            future: Trajectory::new(points, valid).expect("generated future satisfies invariants"),
        }
    }
}

fn random_type(rng: &mut ChaCha8Rng) -> ObjectType {
    ObjectType::ALL[rng.gen_range(0..3usize)]
}

fn generate_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scenario {
    let conflict = Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
    let theta0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let cross = std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.5..0.5);
    let theta1 = wrap_angle(theta0 + if rng.gen_bool(0.5) { cross } else { -cross });

    let yield_slot = rng.gen_range(0..2usize);
    let mut plans = Vec::with_capacity(2);
    for slot in 0..2 {
        let kind = random_type(rng);
        let speed = cruise_speed(kind, rng);
        let theta = if slot == 0 { theta0 } else { theta1 };
        let dir = Vec2::new(theta.cos(), theta.sin());
        let tau = rng.gen_range(cfg.time_to_conflict.0..cfg.time_to_conflict.1);
        let approach = speed * tau;
        let margin = rng.gen_range(cfg.yield_margin.0..cfg.yield_margin.1);
        plans.push(AgentPlan {
            kind,
            dir,
            start: conflict - dir * approach,
            speed,
            yielding: slot == yield_slot,
            stop_dist: (approach - margin).max(1.0),
        });
    }

    let sdc_slot = if rng.gen_bool(cfg.sdc_rate) {
        Some(rng.gen_range(0..2usize))
    } else {
        None
    };
    let mut agents: Vec<Agent> = plans
        .iter()
        .enumerate()
        .map(|(slot, plan)| plan.build_agent(slot as i64, sdc_slot == Some(slot), cfg, rng))
        .collect();

    // Parked context vehicles off to the side of the conflict area.
    let n_ctx = rng.gen_range(0..=cfg.max_context);
    for c in 0..n_ctx {
        let offset = Vec2::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
        let pos = conflict + offset;
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let states = (0..PAST_LEN)
            .map(|_| PastState {
                pos,
                vel: Vec2::zero(),
                heading,
                valid: true,
            })
            .collect();
        agents.push(Agent {
            id: 2 + c as i64,
            kind: ObjectType::Vehicle,
            is_sdc: false,
            past: PastStates::new(states).expect("parked past satisfies invariants"),
            future: Trajectory::constant(pos),
        });
    }

    // Road centerlines along both pair paths.
    let roads = plans
        .iter()
        .map(|p| {
            let behind = conflict - p.dir * (p.speed * cfg.time_to_conflict.1 + 20.0);
            let ahead = conflict + p.dir * (p.speed * (TRAJ_LEN as f64 * STEP_DT) + 10.0);
            vec![behind, conflict, ahead]
        })
        .collect();

    Scenario::new(agents, (0, 1), roads).expect("generated scenario satisfies invariants")
}

/// Generate `n` crossing-paths scenarios. Deterministic per seed.
pub fn synth_generate(n: usize, seed: u64, config: &SynthConfig) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_one(config, &mut rng)).collect()
}
